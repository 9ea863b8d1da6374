use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UadError>;

#[derive(Debug, Error)]
pub enum UadError {
    #[error("shape mismatch: expected {expected}, got {got:?}")]
    Shape { expected: String, got: Vec<usize> },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("history store: {0}")]
    History(String),
}

impl UadError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        UadError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        UadError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
