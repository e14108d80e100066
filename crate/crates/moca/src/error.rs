//! Error type shared across the library.
//!
//! Tensor-level shape contracts panic (they indicate programmer error, in the
//! style of dense linear-algebra crates); everything that can fail because of
//! *data* — degenerate beliefs, non-positive-definite covariances, malformed
//! checkpoints — surfaces as a [`MocaError`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MocaError {
    /// A caller violated a documented API contract (e.g. pruning a training
    /// graph, supervising with an unnormalized belief vector).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Every run-length hypothesis became impossible: the belief cannot be
    /// renormalized.
    #[error("degenerate run-length belief: {0}")]
    DegenerateBelief(String),

    /// A numerical invariant failed (non-finite loss, covariance lost
    /// positive-definiteness, Cholesky breakdown).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Checkpoint file was missing, unreadable, or not in the expected format.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MocaError>;
