//! Error type shared across the crate, with a stable exit-code mapping for
//! the command-line tools.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, dataset spec, or CLI arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape or wiring mismatch detected at model-build or forward time.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite loss or gradient during optimization.
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// Checkpoint, manifest, or other artifact does not match the active
    /// configuration (wrong tensor shapes, wrong variant, stale hash).
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    /// Malformed on-disk artifact (truncated archive, bad manifest line).
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    /// Exit code contract: 0 success, 2 config error, 3 numerical abort,
    /// 4 artifact mismatch, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Numerical(_) => 3,
            Error::ArtifactMismatch(_) | Error::Format(_) => 4,
            _ => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn artifact_mismatch(msg: impl Into<String>) -> Self {
        Error::ArtifactMismatch(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
