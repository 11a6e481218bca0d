use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gradient requested of non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable is not part of this computation record")]
    ForeignVar,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible configuration: {0}")]
    Incompatible(String),
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("malformed record {record}: {message}")]
    Format { record: usize, message: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
