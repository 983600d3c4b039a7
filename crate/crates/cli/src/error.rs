use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Verify(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        })
    }
}

impl From<flashsvd_core::Error> for CliError {
    fn from(e: flashsvd_core::Error) -> Self {
        match e {
            flashsvd_core::Error::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
