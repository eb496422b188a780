use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The job file or its inputs are unusable; nothing was run.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] gramstyle::Error),

    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(_) | CliError::Failed(_) => 1,
        }
    }
}
