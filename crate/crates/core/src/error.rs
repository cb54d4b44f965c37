use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum CarError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Format {
        what: String,
        offset: u64,
        detail: String,
    },

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CarError>;

impl CarError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CarError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        CarError::InvalidArgument(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CarError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for data problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CarError::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
