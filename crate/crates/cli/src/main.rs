use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gramstyle_cli::{run, Command, Overrides};

/// Gram-matrix style transfer and texture synthesis.
#[derive(Parser)]
#[command(name = "gramstyle", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Optimize an image against content and style terms.
    Transfer(JobArgs),
    /// Synthesize a texture from synthetic or stored Gram targets.
    Texture(JobArgs),
    /// Write Gram matrix statistics for an image.
    GramStats(JobArgs),
    /// Compare analytic and numeric gradients.
    Gradcheck(JobArgs),
}

#[derive(Args)]
struct JobArgs {
    /// TOML job file.
    config: PathBuf,
    /// Output image (or directory, for gram-stats).
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Sub::Transfer(a) => (Command::Transfer, a),
        Sub::Texture(a) => (Command::Texture, a),
        Sub::GramStats(a) => (Command::GramStats, a),
        Sub::Gradcheck(a) => (Command::Gradcheck, a),
    };
    let overrides = Overrides { output: args.output, seed: args.seed };
    match run(command, &args.config, &overrides) {
        Ok(summary) => {
            // a closed pipe is not worth a panic
            let _ = writeln!(std::io::stdout().lock(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gramstyle: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
