use std::fmt;

/// Errors surfaced by the library. The CLI maps these onto exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("not strongly convex: mu = {0}")]
    NotStronglyConvex(f64),
    #[error("{0}")]
    Singular(String),
    #[error("spectrum undefined for zero matrix")]
    ZeroMatrix,
    #[error("dense oracle refused: {entries} entries exceeds limit {limit}")]
    OracleLimit { entries: usize, limit: usize },
    #[error("enumeration refused: sample space {size} exceeds budget {budget}")]
    EnumerationBudget { size: f64, budget: usize },
    #[error("iterate became non-finite at inner step {step}")]
    Diverged { step: usize },
    #[error("shifted system is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub(crate) fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
