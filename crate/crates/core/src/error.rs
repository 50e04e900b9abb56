use std::path::PathBuf;

use thiserror::Error;

use crate::io::GridFileError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A gradient or loss became NaN/inf during optimization.
    #[error("non-finite value at iteration {iteration} ({what})")]
    NonFinite { iteration: u64, what: String },

    #[error("grid file: {0}")]
    GridFile(#[from] GridFileError),

    #[error("camera file {path}: {message}")]
    CameraFile { path: PathBuf, message: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
