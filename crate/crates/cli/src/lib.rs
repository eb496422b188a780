//! Command-line front end for `gramstyle`: job files, subcommands and exit
//! codes.

pub mod commands;
pub mod config;
pub mod error;

use std::path::Path;

pub use commands::Overrides;
pub use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Transfer,
    Texture,
    GramStats,
    Gradcheck,
}

/// Runs one subcommand and returns the text to print on success.
///
/// A gradient check above its threshold is reported as
/// [`CliError::Failed`] carrying the full table.
pub fn run(command: Command, config: &Path, overrides: &Overrides) -> Result<String, CliError> {
    match command {
        Command::Transfer => commands::transfer(config, overrides).map(|r| r.summary()),
        Command::Texture => commands::texture(config, overrides).map(|r| r.summary()),
        Command::GramStats => commands::gram_stats_cmd(config, overrides).map(|r| r.summary()),
        Command::Gradcheck => {
            let report = commands::gradcheck(config, overrides)?;
            if report.passed() {
                Ok(report.summary())
            } else {
                Err(CliError::Failed(format!("{}\ngradient check failed", report.summary())))
            }
        }
    }
}
