use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum IcdmError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error in `{op}`: {message}")]
    Numeric { op: &'static str, message: String },

    #[error("no evidence: student {0} has no response logs")]
    NoEvidence(u64),

    #[error("unknown exercise id {0}")]
    UnknownExercise(u64),

    #[error("unknown student id {0}")]
    UnknownStudent(u64),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IcdmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IcdmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = IcdmError> = std::result::Result<T, E>;
