//! Meta-learning online changepoint adaptation.
//!
//! This crate implements a differentiable Bayesian run-length filter over
//! streaming posteriors: a bank of recursively updated posterior statistics
//! (one per possible run length since the last task switch), a belief over
//! those run lengths maintained in log space, and mixture predictions that
//! marginalize over the belief. Because every step is built from autodiff
//! ops, the negative log likelihood of a filtered stream is differentiable
//! end to end with respect to the underlying model's parameters, so priors
//! and feature encoders can be meta-trained directly against non-stationary
//! streams.
//!
//! Crate layout:
//! - [`tensor`]: dense `f64` arrays and small linear-algebra kernels.
//! - [`autodiff`]: reverse-mode graph values, parameter store + checkpoints,
//!   MLP encoders, Adam.
//! - [`filter`]: the run-length filter, supervision overrides, pruning.
//! - [`alpaca`]: Bayesian last-layer regression model (matrix-normal prior).
//! - [`pcoc`]: generative classification model (Dirichlet class prior,
//!   Gaussian class-conditional embeddings).
//! - [`envs`]: switching-task stream generators (sinusoid regression, wheel
//!   bandit, synthetic classification).
//! - [`agents`]: conditioning-policy baselines and bandit action selection.
//! - [`trainer`]: meta-training loop, evaluation harness, changepoint
//!   detection statistics.
//! - [`testing`]: small fixed-parameter models used by the test suites.

pub mod agents;
pub mod alpaca;
pub mod autodiff;
pub mod envs;
mod error;
pub mod filter;
pub mod gradcheck;
pub mod pcoc;
pub mod tensor;
pub mod testing;
pub mod trainer;

pub use error::{MocaError, Result};
