use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the filter, the analysis tools and the log readers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The error-quaternion vector part produced by a correction exceeded unit length.
    #[error("divergent attitude update: |dq_v| = {norm}")]
    DivergentUpdate { norm: f64 },

    #[error("initialization is degenerate: {0}")]
    DegenerateInitialization(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("timestamps are not strictly increasing at t = {t}")]
    NonMonotonicTime { t: f64 },

    #[error("filter diverged at t = {t}: {reason}")]
    Diverged { t: f64, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
