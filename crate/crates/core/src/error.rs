use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("symplectic operation needs an even length, got {0}")]
    OddLength(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("graph signature mismatch: model {model}, graph {graph}")]
    SignatureMismatch { model: String, graph: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
