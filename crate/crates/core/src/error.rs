use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the continual-learning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a documented precondition (shapes, ranges, layouts).
    #[error("rejected input: {0}")]
    Rejected(String),

    /// A non-finite value appeared during computation.
    #[error("numerical fault: {0}")]
    Numerical(String),

    /// A file did not match its expected binary or text format.
    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::Rejected(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
