//! Crate-wide error type.
//!
//! Every rejected contract carries enough context to name the failing
//! operation and the offending shapes or file.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was given tensors whose shapes do not conform.
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    /// An operation was given an input containing NaN or Inf.
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    /// Invalid configuration, argument, or precondition.
    #[error("invalid config: {0}")]
    Config(String),

    /// Dataset or file-format problem.
    #[error("data error: {0}")]
    Data(String),

    /// I/O failure, with the path that caused it.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Numeric failure (divergence, gradient-check failure, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code category used by the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } => 2,
            Error::Shape { .. } | Error::NonFinite { .. } | Error::Numeric(_) => 3,
        }
    }
}
