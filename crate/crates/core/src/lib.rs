//! Sparse mixture of bottlenecked expert autoencoders (SMIXAE).
//!
//! Decomposes activation vectors into a sparse sum of small expert
//! autoencoders, each with a low-dimensional bottleneck in which curved
//! feature manifolds (rings, helices, tori) can be represented directly.
//!
//! - [`numerics`]: tensors, Adam, the warmup-stable-decay schedule.
//! - [`model`]: forward pass, gating, loss and analytic gradients, checkpoints.
//! - [`data`]: activation shards, batching, synthetic manifold generators.
//! - [`train`]: the training loop.
//! - [`eval`]: reconstruction and sparsity metrics.
//! - [`probe`]: supervised probing of expert bottlenecks.

pub mod data;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod train;

#[cfg(feature = "cli")]
pub mod cli;
mod par;

pub use model::{
    decode, encode, init_params, loss_and_grads, param_count, GatedLatents, GatingMode,
    SmixaeConfig, SmixaeParams,
};
pub use numerics::Tensor;
