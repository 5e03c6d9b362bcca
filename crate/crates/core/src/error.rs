use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the inference core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask has no foreground pixels")]
    EmptyForeground,

    #[error("support mask {shot} has no positive pixels")]
    EmptySupportMask { shot: usize },

    #[error("no keyframe: every foreground signature is degenerate")]
    NoKeyframe,

    #[error("need at least {window} frames for window {window}, got {frames}")]
    InsufficientFrames { window: usize, frames: usize },

    #[error("non-finite loss at stage {stage} iteration {iteration}: {detail}")]
    NonFiniteLoss {
        stage: u8,
        iteration: usize,
        detail: String,
    },

    #[error("tensor format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
