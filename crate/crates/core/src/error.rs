use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures surfaced by the estimation pipeline and its I/O layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("risk-set aggregate S vanished at event time {time}; truncation horizon is too large")]
    EstimationDomain { time: f64 },
    #[error("product-integral factor {factor} is not positive at event time {time}")]
    ProductIntegralSingular { time: f64, factor: f64 },
    #[error("jump of C_n is zero at event index {index}; cannot invert")]
    ZeroCJump { index: usize },
    #[error("tridiagonal system is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("information matrix is singular (smallest eigenvalue {eigenvalue:e}, null direction {direction:?})")]
    SingularInformation { eigenvalue: f64, direction: Vec<f64> },
    #[error(
        "score iteration did not converge after {iterations} iterations (|U| = {score_norm:e}, theta = {theta:?})"
    )]
    NonConvergence { iterations: usize, score_norm: f64, theta: Vec<f64> },
    #[error("group {0} of the partition is empty")]
    EmptyGroup(String),
    #[error("{context}, line {line}: {message}")]
    Parse { context: String, line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 3,
            Error::EstimationDomain { .. }
            | Error::ProductIntegralSingular { .. }
            | Error::ZeroCJump { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::SingularInformation { .. } => 4,
            _ => 2,
        }
    }
}
