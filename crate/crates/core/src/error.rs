//! Error types shared across the crate.

use thiserror::Error;

/// Result type for all fallible operations in this crate.
pub type Result<T> = std::result::Result<T, SentinelError>;

/// Errors raised by the simulator and its numeric kernels.
#[derive(Debug, Error)]
pub enum SentinelError {
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("partition infeasible: {0}")]
    Partition(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SentinelError {
    pub(crate) fn dim(axis: impl Into<String>, expected: usize, got: usize) -> Self {
        SentinelError::Dimension {
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SentinelError::Io {
            path: path.into(),
            source,
        }
    }
}
