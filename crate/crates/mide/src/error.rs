//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MideError {
    /// Invalid configuration, CLI usage, or construction arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Dimension or shape mismatch between containers.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numerical routine failed (non-PSD matrix, divergence, domain).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Filesystem failure, annotated with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MideError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MideError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MideError>;
