//! Crate-wide error type shared by all simulator components.

use std::path::PathBuf;

/// Errors raised by simulator components.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value (bad hyperparameter, nhead out of range, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Inconsistent in-memory state (length mismatch, non-finite values, ...).
    #[error("integrity error: {0}")]
    Integrity(String),
    /// Malformed input file.
    #[error("format error: {0}")]
    Format(String),
    /// Requested data partition cannot be satisfied.
    #[error("partition error: {0}")]
    Partition(String),
    /// Operation requires at least one element.
    #[error("empty input: {0}")]
    Empty(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
