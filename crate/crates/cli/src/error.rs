use std::path::PathBuf;

use insiderlab::LabError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("consistency failure: {0}")]
    Consistency(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed report {path}: {message}")]
    Report { path: PathBuf, message: String },

    #[error(transparent)]
    Lab(#[from] LabError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 validation, 2 consistency, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Consistency(_) => 2,
            CliError::Io { .. } | CliError::Report { .. } => 3,
            CliError::Lab(e) => match e {
                LabError::Config(_) | LabError::TruncationTooLoose { .. } => 1,
                LabError::LongOnlyViolation { .. } => 1,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
