use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::SkipReason;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, ranges or arguments supplied by the caller.
    #[error("validation error: {0}")]
    Validation(String),

    /// Backbone input width does not match the stage's concatenation layout.
    #[error("channel mismatch: expected {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("stage mismatch: expected {expected}, got {actual}")]
    StageMismatch { expected: String, actual: String },

    #[error("backend registry: {0}")]
    Registry(String),

    #[error("record skipped: {0}")]
    Skipped(SkipReason),

    #[error("corrupt record at {path}: {reason}")]
    CorruptRecord { path: PathBuf, reason: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::ChannelMismatch { .. }
                | Error::StageMismatch { .. }
                | Error::Config(_)
                | Error::Registry(_)
        )
    }
}
