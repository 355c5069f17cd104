//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("dataset too small: need at least {needed}, found {got}")]
    DatasetTooSmall { needed: usize, got: usize },

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    #[error("artifact hash mismatch for {what}: expected {expected}, got {got}")]
    HashMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("non-finite loss at iteration {iter} ({context})")]
    NonFiniteLoss { iter: usize, context: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
