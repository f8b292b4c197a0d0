use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("design failure: {0}")]
    DesignFailure(String),

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("membership test indeterminate: {0}")]
    Indeterminate(String),

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("error-bound estimation failure: {0}")]
    EstimationFailure(String),

    #[error("control failure: {0}")]
    ControlFailure(String),

    #[error("replication failure: {0}")]
    ReplicationFailure(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
