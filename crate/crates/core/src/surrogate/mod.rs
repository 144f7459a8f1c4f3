//! Gaussian-process regression on embedded observations.

mod cv;
mod gp;
mod kernel;

use thiserror::Error;

pub use cv::{cv_folds, gp_cv_mse, CvPolicy, CvResult};
pub use gp::{fit_gp, FitOptions, MllObjective, Normalize, Standardize, SurrogateModel};
pub use gp::{LENGTHSCALE_BOUNDS, NOISE_BOUNDS, SIGNAL_BOUNDS};
pub use kernel::{cross, gram, matern52, matern52_corr, matern52_kernel, scaled_distance, KernelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least 2 training points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("factorization failed even at maximum jitter")]
    FitFailed,
}
