//! Trajectory world models over heterogeneous environments.
//!
//! Trajectories are flattened into a timestep × variate grid of scalars, each
//! scalar is discretized into a categorical distribution over uniform bins, and
//! a Transformer that alternates causal temporal attention with per-timestep
//! variate attention predicts the next state and reward. The crate covers data
//! handling, training, cached autoregressive rollout, model-based off-policy
//! evaluation, model-predictive control and two comparison models.

pub mod baselines;
pub mod dataset;
pub mod encoding;
pub mod envs;
pub mod evaluation;
pub mod model;
pub mod rollout;
pub mod tensor;
pub mod training;

use thiserror::Error;

pub use tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("episode {episode}: non-finite value in {field}")]
    NonFinite { episode: usize, field: &'static str },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty data: {0}")]
    Empty(String),
    #[error("step {step}: non-finite loss")]
    NonFiniteLoss { step: u64 },
    #[error("block {block}: non-finite activation")]
    NonFiniteActivation { block: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Deterministic seed for a sub-stream identified by `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = tensor::splitmix(base ^ 0x5851_f42d_4c95_7f2d);
    for &p in parts {
        h = tensor::splitmix(h ^ p.wrapping_mul(0x2545_f491_4f6c_dd1d));
    }
    h
}
