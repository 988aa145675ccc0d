use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid category mask: {0}")]
    InvalidMask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("buffer corruption: {0}")]
    BufferCorruption(String),

    #[error("training diverged for client {client} at round {round}: {detail}")]
    Diverged {
        client: usize,
        round: usize,
        detail: String,
    },

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FedError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FedError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }
}
