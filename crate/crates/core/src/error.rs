use std::io;

use thiserror::Error;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("episode already finished; call reset first")]
    EpisodeFinished,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
