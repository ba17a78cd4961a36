use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("length mismatch: {0}")]
    Alignment(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Grid quadrature lost (or gained) more probability mass than allowed.
    #[error("grid resolution too coarse: {0}")]
    Resolution(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
