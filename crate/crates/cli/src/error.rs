use latte_core::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Failures with stable process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("loss became non-finite at step {step}")]
    NonFinite { step: u64 },

    #[error("i/o: {0}")]
    Io(String),

    #[error("verification failed: {}", .0.join(", "))]
    Verify(Vec<String>),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verify(_) | CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::NonFinite { .. } => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            Error::Json(e) => CliError::Config(e.to_string()),
            Error::NonFiniteLoss { step } => CliError::NonFinite { step },
            e @ (Error::Io(_) | Error::Checkpoint { .. }) => CliError::Io(e.to_string()),
            e => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
