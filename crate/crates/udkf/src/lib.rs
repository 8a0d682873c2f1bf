//! UD-factorized Kalman-like filtering and maximum-likelihood estimation
//! for linear time-invariant MIMO and pairwise state-space models.
//!
//! The crate carries covariances in factored form `P = U D U^T` (U unit
//! upper triangular, D diagonal) and propagates the factors with modified
//! weighted Gram-Schmidt pre-array/post-array updates. On top of the filter
//! sits an exactly differentiated version of the same recursion, which
//! yields the analytic score of the log-likelihood at roughly the cost of
//! one extra filter pass per parameter. A conventional (non-factorized)
//! filter and its sensitivity equations are included as the baseline.

pub mod error;
pub mod filt_conv;
pub mod filt_ud;
pub mod filt_ud_diff;
pub mod filter;
pub mod matops;
pub mod mle;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use filt_conv::{conv_run, conv_run_with_score, ConvRun, ConvScoreRun};
pub use filt_ud::{ud_run, UdFilterState, UdRun, UdStepOutput};
pub use filt_ud_diff::{
    diff_ud, loglik_and_score_ud, ud_run_with_score, DiffUdResult, LogLikEval, UdScoreRun,
};
pub use filter::FilterData;
pub use matops::{mwgs, udu_factorize, MwgsResult, UdFactor, DEFAULT_EPS};
pub use mle::{
    fit_mle, fit_model, monte_carlo_study, Estimator, FitConfig, FitResult, FitStatus, McRun,
    McStudy, McSummary, Transform,
};
pub use model::{
    Dims, Example1Model, FilterContext, FixedModel, Model, ModelKind, RawMatrices, SimOutput,
    TeeModel,
};
pub use rng::Rng;
