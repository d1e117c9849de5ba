//! Activation shards, shuffled batching, and synthetic manifold data.

mod batch;
mod manifold;
mod mlrh;
mod shard;

use thiserror::Error;

pub use batch::{batch_stream, BatchStream};
pub use manifold::{
    embed_isometry, random_frame, sample_manifold, ManifoldKind, ManifoldSample, ManifoldSpec,
};
pub use mlrh::{sample_mlrh, MlrhFeature, MlrhSpec};
pub use shard::{
    read_shard, write_shard, ActivationShard, LabelColumn, LabelValues, SHARD_MAGIC, SHARD_VERSION,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a shard file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported shard version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated shard: missing {0}")]
    Truncated(String),
    #[error("non-finite activation at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Samples a single manifold and embeds it isometrically into
/// `spec.ambient_dim` dimensions, keeping the generating parameters as labels.
pub fn manifold_shard(spec: &ManifoldSpec, count: usize, seed: u64, embed_seed: u64) -> Result<ActivationShard, DataError> {
    let sample = sample_manifold(spec, count, seed)?;
    let embedded = embed_isometry(&sample.points, spec.ambient_dim, embed_seed)?;
    ActivationShard::new(
        spec.ambient_dim,
        embedded.data().iter().map(|&v| v as f32).collect(),
        sample.labels,
    )
}
