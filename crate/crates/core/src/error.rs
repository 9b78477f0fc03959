use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes. The CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Solver,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    BadValue {
        row: usize,
        column: String,
        message: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("treatment label {label} outside 1..={k}")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("unsupported scenario: {0}")]
    Unsupported(String),

    #[error("calibration target is outside the arm's covariate hull: {0}")]
    NoOverlap(String),

    #[error("tilting argument {value} leaves the domain of rho for gamma = {gamma}")]
    DomainViolation { gamma: f64, value: f64 },

    #[error("{solver} did not converge within {iterations} iterations (residual {residual:.3e})")]
    MaxIterations {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("arm {arm}: {source}")]
    Arm {
        arm: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("singular system: {0}")]
    Singular(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) => ErrorClass::Io,
            Error::NoOverlap(_)
            | Error::DomainViolation { .. }
            | Error::MaxIterations { .. }
            | Error::Singular(_) => ErrorClass::Solver,
            Error::Arm { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }
}
