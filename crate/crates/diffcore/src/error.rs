use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("causal mask requires as many queries as keys (got {queries} queries, {keys} keys)")]
    InvalidMask { queries: usize, keys: usize },

    #[error("tensor contains a non-finite value at index {0}")]
    NonFinite(usize),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was built in inference mode; no backward rules were recorded")]
    NotRecorded,

    #[error("invalid hyperparameter: {0}")]
    Hyper(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dim {
        op,
        detail: detail.into(),
    })
}
