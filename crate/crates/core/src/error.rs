use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("invalid outcome: {0}")]
    InvalidOutcome(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate parameterization: {0}")]
    DegenerateParameterization(String),

    #[error("no offset available for epoch {0}")]
    UnalignableEpoch(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
