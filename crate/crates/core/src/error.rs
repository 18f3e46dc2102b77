use thiserror::Error;

/// Errors produced across the workbench.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty trace")]
    EmptyTrace,

    #[error("trace of length {len} exceeds capacity {capacity}; needs at least K={required_k} channels at this side length")]
    Capacity {
        len: usize,
        capacity: usize,
        required_k: usize,
    },

    #[error("index {index} out of bounds for capacity {capacity}")]
    OutOfBounds { index: usize, capacity: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("modality mismatch: {0}")]
    Modality(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Error {
    Error::Shape {
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}
