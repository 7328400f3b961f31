use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed image: {0}")]
    Image(String),

    #[error("report version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
