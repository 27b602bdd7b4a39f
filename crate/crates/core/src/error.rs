use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("vector is not on the unit sphere (norm {0})")]
    NotUnit(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("importance sampler degenerate: ess {ess:.2} below floor {floor}")]
    Degenerate { ess: f64, floor: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("data validation: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
