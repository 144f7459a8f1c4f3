//! Bayesian optimization of system prompts in an LLM-elicited feature space.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the scalar to `f64`, which the optimizer uses.

pub mod acquisition;
pub mod baselines;
pub mod diagnostics;
pub mod domain;
pub mod elicitation;
pub mod linalg;
pub mod llm;
pub mod optimizer;
pub mod oracle;
pub mod par;
pub mod realization;
mod scalar;
pub mod streams;
pub mod surrogate;
pub mod templates;

pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Gp = surrogate::SurrogateModel<f64>;
pub type KernelParams = surrogate::KernelParams<f64>;
