use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported image format: {0}")]
    UnsupportedImage(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
}

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

pub type Result<T, E = Error> = std::result::Result<T, E>;
