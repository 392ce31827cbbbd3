use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("sequence too long: {len} > {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("empty loss mask")]
    EmptyMask,

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("malformed input at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("timer resolution {0:?} is coarser than 1ms")]
    TimerResolution(std::time::Duration),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
