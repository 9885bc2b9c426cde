//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tokenization, modeling, optimization and I/O.
#[derive(Debug, Error)]
pub enum GycError {
    #[error("empty input")]
    EmptyInput,

    #[error("unknown word '{0}'")]
    UnknownWord(String),

    #[error("context overflow: history already holds {len} positions (max {max})")]
    ContextOverflow { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GycError>;
