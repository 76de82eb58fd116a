use std::path::PathBuf;

use thiserror::Error;

use crate::tokcodec::BitstreamError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("token id {id} outside vocabulary of size {size}")]
    OutOfVocab { id: u32, size: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },

    #[error("non-finite loss at step {step} ({name}); snapshot written to {snapshot:?}")]
    NonFinite { step: usize, name: String, snapshot: Option<PathBuf> },

    #[error("frozen-parameter contract violated: {0}")]
    FrozenViolation(String),

    #[error(transparent)]
    Bitstream(#[from] BitstreamError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch { expected: expected.to_string(), got: got.to_string() }
    }
}
