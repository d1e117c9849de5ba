//! Dense tensors, seeded randomness, Adam, the WSD schedule, and a
//! finite-difference gradient oracle.

mod adam;
mod finite_diff;
mod schedule;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use finite_diff::{finite_diff_grad, relative_error};
pub use schedule::{wsd_lr, LrSchedule};
pub use tensor::{dot, Real, Tensor};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss when perturbing entry {index}")]
    NonFinite { index: usize },
}

/// Every generator in the crate is a `ChaCha8Rng` built from an explicit seed.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
