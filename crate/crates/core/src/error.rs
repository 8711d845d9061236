use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or channel widths do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument is outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an API contract (missing gradient, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A JSON document did not match its schema. `path` is a JSONPath-like locator.
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("non-finite loss at step {step} ({phase}): {value}")]
    NonFinite { step: usize, phase: String, value: f32 },

    #[error("function preservation violated: {0}")]
    Preservation(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }

    pub fn param(message: impl Into<String>) -> Self {
        Error::Parameter(message.into())
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}
