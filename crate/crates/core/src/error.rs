use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column `{column}` not found")]
    MissingColumn { column: String },

    #[error("validation error at row {row}, column `{column}`: {message}")]
    Validation {
        row: usize,
        column: String,
        message: String,
    },

    #[error("role error: {0}")]
    Role(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("shape error: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("empty stratum: {0}")]
    EmptyStratum(String),

    #[error("denominator {value:e} is below the minimum magnitude {min:e}")]
    NearZeroDenominator { value: f64, min: f64 },

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("matrix error: {0}")]
    Matrix(String),

    #[error("solver did not converge after {passes} passes (max KKT violation {violation:e})")]
    Convergence { passes: usize, violation: f64 },

    #[error("target misreporting rate {target_mr} is infeasible with P(X*=1)={p1}: mu would exceed 1")]
    Infeasible { target_mr: f64, p1: f64 },

    #[error("simulation spec error in `{equation}` ({coefficients}): probability {probability} outside [0, 1]")]
    Spec {
        equation: &'static str,
        coefficients: String,
        probability: f64,
    },

    #[error("bootstrap degenerate: only {ok} of {required} resamples succeeded after {draws} draws")]
    BootstrapDegenerate { ok: usize, required: usize, draws: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
