use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Exit status for a failed command.
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("{path}: invalid JSON: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(mpogpt_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numeric(_) | CliError::Core(mpogpt_core::Error::Numeric(_)) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<mpogpt_core::Error> for CliError {
    fn from(e: mpogpt_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
