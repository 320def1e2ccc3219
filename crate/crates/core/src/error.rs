use thiserror::Error;

/// Errors raised by design construction, model setup, solvers and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid table schema: {0}")]
    InvalidSchema(String),

    #[error("design too large: {0}")]
    SizeOverflow(String),

    #[error("invalid design matrix: {0}")]
    InvalidDesign(String),

    #[error("invalid problem instance: {0}")]
    InvalidInstance(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A solver was asked to run on a design it cannot handle.
    #[error("{solver} requires {requirement}")]
    Contract {
        solver: &'static str,
        requirement: String,
    },

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
