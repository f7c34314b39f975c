use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("size mismatch for tensor `{tensor}`: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        tensor: String,
        expected: usize,
        actual: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("accuracy budget exceeded: {0}")]
    Budget(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
