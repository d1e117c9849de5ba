use rand::seq::SliceRandom;

use super::shard::ActivationShard;
use super::DataError;
use crate::numerics::{derive_seed, seeded_rng, Tensor};

/// Shuffled fixed-size batches over a set of shards.
///
/// Each epoch visits a fresh seeded permutation of all rows; the trailing
/// partial batch of every epoch is dropped.
pub struct BatchStream<'a> {
    shards: &'a [ActivationShard],
    /// Starting global row index of each shard.
    offsets: Vec<usize>,
    n: usize,
    total: usize,
    batch_size: usize,
    seed: u64,
    epochs: usize,
    epoch: usize,
    perm: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        shards: &'a [ActivationShard],
        batch_size: usize,
        seed: u64,
        epochs: usize,
    ) -> Result<Self, DataError> {
        let n = shards
            .first()
            .map(|s| s.n())
            .ok_or_else(|| DataError::Contract("batch stream needs at least one shard".into()))?;
        if let Some(bad) = shards.iter().find(|s| s.n() != n) {
            return Err(DataError::Contract(format!(
                "shard dimensions differ: {n} vs {}",
                bad.n()
            )));
        }
        let mut offsets = Vec::with_capacity(shards.len());
        let mut total = 0;
        for s in shards {
            offsets.push(total);
            total += s.count();
        }
        if batch_size == 0 || total < batch_size {
            return Err(DataError::Contract(format!(
                "batch size {batch_size} needs at least that many rows, have {total}"
            )));
        }
        Ok(Self {
            shards,
            offsets,
            n,
            total,
            batch_size,
            seed,
            epochs,
            epoch: 0,
            perm: Vec::new(),
            cursor: usize::MAX,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.total / self.batch_size
    }

    pub fn epoch_permutation(&self, epoch: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.total).collect();
        perm.shuffle(&mut seeded_rng(derive_seed(self.seed, epoch as u64)));
        perm
    }

    fn global_row(&self, g: usize) -> &[f32] {
        let s = self.offsets.partition_point(|&o| o <= g) - 1;
        self.shards[s].row(g - self.offsets[s])
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Tensor<f32>;

    fn next(&mut self) -> Option<Tensor<f32>> {
        if self.cursor == usize::MAX || self.cursor + self.batch_size > self.total {
            if self.cursor != usize::MAX {
                self.epoch += 1;
            }
            if self.epoch >= self.epochs {
                return None;
            }
            self.perm = self.epoch_permutation(self.epoch);
            self.cursor = 0;
        }
        let mut data = Vec::with_capacity(self.batch_size * self.n);
        for &g in &self.perm[self.cursor..self.cursor + self.batch_size] {
            data.extend_from_slice(self.global_row(g));
        }
        self.cursor += self.batch_size;
        Some(Tensor::from_vec(&[self.batch_size, self.n], data).expect("sized above"))
    }
}

pub fn batch_stream(
    shards: &[ActivationShard],
    batch_size: usize,
    seed: u64,
    epochs: usize,
) -> Result<BatchStream<'_>, DataError> {
    BatchStream::new(shards, batch_size, seed, epochs)
}
