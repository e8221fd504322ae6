use std::path::PathBuf;

use lsenet_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LsenetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
}

pub type Result<T, E = LsenetError> = std::result::Result<T, E>;

impl LsenetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LsenetError::Config(msg.into()))
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()).into())
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Argument(msg.into()).into())
}
