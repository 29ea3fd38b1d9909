use thiserror::Error;

use crate::net::NetError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("label {label} outside 0..{classes}")]
    InvalidLabel { label: usize, classes: usize },

    #[error("timestamps not sorted at index {0}")]
    Unsorted(usize),

    #[error("classifier parameters have not been trained")]
    Untrained,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stream format: {0}")]
    StreamFormat(String),

    #[error("state machine: {0}")]
    State(String),

    #[error(transparent)]
    Net(#[from] NetError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
