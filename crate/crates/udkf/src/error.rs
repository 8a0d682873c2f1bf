//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("matrix is not symmetric: max asymmetry {asymmetry:e} exceeds tolerance {tol:e}")]
    NotSymmetric { asymmetry: f64, tol: f64 },

    #[error("matrix is not positive semi-definite: pivot {pivot:e} at index {index}")]
    IndefiniteMatrix { pivot: f64, index: usize },

    #[error("all MWGS weights are degenerate but a nonzero row must be represented")]
    DegenerateWeights,

    #[error("measurement noise covariance H is singular (d[{index}] = {value:e})")]
    SingularH { index: usize, value: f64 },

    #[error("innovation covariance is numerically singular at step {step}")]
    SingularInnovationCov { step: usize },

    #[error("zero D_R pivot at index {index} with non-negligible numerator {numerator:e}")]
    ZeroDrPivot { index: usize, numerator: f64 },

    #[error("log-likelihood is not finite at step {step}")]
    NonFiniteLogLik { step: usize },

    #[error("score is not finite at step {step}")]
    NonFiniteScore { step: usize },

    #[error("invalid ill-conditioning parameter delta = {0} (must be > 0)")]
    InvalidDelta(f64),

    #[error("GARCH process is non-stationary: a1 + b1 = {0} >= 1")]
    NonStationary(f64),

    #[error("predicted conditional variance {0} is not positive")]
    NonPositiveVariance(f64),

    #[error("invalid bounds: lower must be strictly below upper and theta0 within the box")]
    InvalidBounds,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("filter step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps an error with the index of the filter step where it occurred.
    pub fn at_step(self, step: usize) -> Error {
        match self {
            Error::StepFailed { .. } => self,
            other => Error::StepFailed {
                step,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
