use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("snapshot load failed: {0}")]
    Load(String),

    #[error("hypernym chain from '{start}' exceeds {limit} hops (cycle?)")]
    HypernymCycle { start: String, limit: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds max_tokens={max}")]
    Overlength { len: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: non-finite {component} (batch indices {batch:?})")]
    Diverged {
        step: usize,
        component: String,
        batch: Vec<usize>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
