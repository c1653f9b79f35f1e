use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing input file {0}")]
    MissingFile(PathBuf),

    #[error("parse error in {file} line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("invariant violated at {location}: {description}")]
    InvariantViolation {
        description: String,
        location: String,
    },

    #[error("year {0} is outside the data range")]
    YearOutOfRange(i32),

    #[error("degenerate knots: {0}")]
    DegenerateKnots(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("all penalty matrices are zero")]
    AllZeroMatrix,

    #[error("coefficient layout mismatch: expected {expected}, got {got}")]
    LayoutMismatch { expected: usize, got: usize },

    #[error("partition group indices are not contiguous from 0: {0:?}")]
    NonContiguousGroups(Vec<i64>),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite density: {0}")]
    NonFiniteDensity(String),

    #[error("inner optimization diverged: {0}")]
    InnerDivergence(String),

    #[error("Hessian is not positive definite: {0}")]
    IndefiniteHessian(String),

    #[error("data too small: {0}")]
    DataTooSmall(String),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("too few years: {0}")]
    TooFewYears(String),

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("no root: requested catch biomass {requested} exceeds attainable maximum {attainable}")]
    NoRoot { requested: f64, attainable: f64 },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("baseline model {0} missing from report")]
    BaselineMissing(String),

    #[error("fits are not from the same stock: {0}")]
    StockMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invariant(description: impl Into<String>, location: impl Into<String>) -> Self {
        Error::InvariantViolation {
            description: description.into(),
            location: location.into(),
        }
    }
}
