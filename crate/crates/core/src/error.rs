use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] diffcore::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("scripted expert failed on task `{task}` seed {seed}")]
    ExpertFailure { task: String, seed: u64 },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch} step {step}: loss is {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    ModelKind { found: String, expected: String },

    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
