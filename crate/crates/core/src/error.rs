use std::path::PathBuf;

use thiserror::Error;
use vlamd_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("sequence of length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },

    #[error("alignment: {0}")]
    Alignment(String),

    #[error("capacity: {0}")]
    Capacity(String),

    #[error("layout: word {word:?} needs {needed}px but image is {width}px wide")]
    Layout { word: String, needed: usize, width: usize },

    #[error("input: {0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Error {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
