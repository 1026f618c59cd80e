use alloc::string::String;

/// Errors produced by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("index {index} out of range for length {len}")]
    Bounds { index: usize, len: usize },
    #[error("frame ordering violated: key frame {key} is after frame {frame}")]
    Ordering { key: usize, frame: usize },
    #[error("non-finite input: {0}")]
    NumericInput(&'static str),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid state: {0}")]
    State(&'static str),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config { field, reason: reason.into() }
    }
}
