use std::path::PathBuf;

use thiserror::Error;

use crate::data_io::FeatureFileError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    FeatureFile {
        path: PathBuf,
        #[source]
        source: FeatureFileError,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss in term `{term}` (value {value}) at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        value: f64,
        epoch: usize,
        step: usize,
    },
    #[error("parse error in {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
