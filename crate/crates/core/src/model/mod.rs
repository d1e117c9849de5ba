//! The SMIXAE architecture.
//!
//! Each of the `j` experts is a two-layer encoder `n -> p -> b` followed by a
//! linear decoder `b -> p -> n`. Bottleneck activations are rescaled by the
//! Frobenius norm of the expert's composed decoder, then gated on their L2
//! norm: BatchTopK across the whole batch during training, a fixed threshold
//! `t` at inference. Reconstructions of admitted experts are summed with a
//! shared output bias.

mod backward;
mod checkpoint;
mod forward;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{seeded_rng, Real, Tensor};

pub use backward::{loss_and_grads, LossBreakdown, StepOutput};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, Normalization, OptimizerState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{
    aux_loss, batch_topk, decode, encode, reconstruct, update_threshold, GatedLatents, GatingMode,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in expert {expert}")]
    NonFiniteExpert { expert: usize },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("no experts admitted; threshold cannot be updated")]
    NoAdmitted,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error(transparent)]
    Header(#[from] serde_json::Error),
}

/// Which bottleneck norm the auxiliary loss compares against `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxNorm {
    /// Norm after decoder-norm rescaling (same units as `t`).
    #[default]
    Scaled,
    /// Norm of the raw bottleneck before rescaling.
    Unscaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmixaeConfig {
    /// Input dimension.
    pub n: usize,
    /// Number of experts.
    pub j: usize,
    /// Per-expert hidden width.
    pub p: usize,
    /// Bottleneck dimension.
    pub b: usize,
    /// Experts admitted per token (on average) during training.
    pub k: usize,
    pub lambda_aux: f64,
    pub threshold_lr: f64,
    pub leaky_slope: f64,
    pub decoder_init_norm: f64,
    #[serde(default)]
    pub aux_norm: AuxNorm,
}

impl SmixaeConfig {
    /// Full-scale hyperparameters for an input of width `n`.
    pub fn full_scale(n: usize) -> Self {
        Self {
            n,
            j: 2048,
            p: 16,
            b: 3,
            k: 64,
            lambda_aux: 9e-6,
            threshold_lr: 0.1,
            leaky_slope: 1e-4,
            decoder_init_norm: 0.1,
            aux_norm: AuxNorm::Scaled,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n == 0 || self.j == 0 || self.p == 0 || self.b == 0 {
            return bad(format!(
                "dimensions must be positive (n={}, j={}, p={}, b={})",
                self.n, self.j, self.p, self.b
            ));
        }
        if self.k == 0 || self.k > self.j {
            return bad(format!("k must lie in [1, j={}], got {}", self.j, self.k));
        }
        if !(self.threshold_lr > 0.0 && self.threshold_lr <= 1.0) {
            return bad(format!("threshold_lr must lie in (0, 1], got {}", self.threshold_lr));
        }
        if !(self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope must be >= 0, got {}", self.leaky_slope));
        }
        if !(self.lambda_aux >= 0.0) {
            return bad(format!("lambda_aux must be >= 0, got {}", self.lambda_aux));
        }
        if !(self.decoder_init_norm > 0.0) {
            return bad(format!(
                "decoder_init_norm must be positive, got {}",
                self.decoder_init_norm
            ));
        }
        Ok(())
    }
}

/// Number of trained scalars: `j(2pn + 2pb) + jp + n`.
pub fn param_count(config: &SmixaeConfig) -> u64 {
    let (n, j, p, b) = (
        config.n as u64,
        config.j as u64,
        config.p as u64,
        config.b as u64,
    );
    j * (2 * p * n + 2 * p * b) + j * p + n
}

/// Identifies one of the six trained tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamName {
    WEnc,
    BEnc,
    WBottleneck,
    WUnbottleneck,
    WDec,
    BDec,
}

impl ParamName {
    /// Serialization order.
    pub const ALL: [ParamName; 6] = [
        ParamName::WEnc,
        ParamName::BEnc,
        ParamName::WBottleneck,
        ParamName::WUnbottleneck,
        ParamName::WDec,
        ParamName::BDec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::WEnc => "W_e",
            ParamName::BEnc => "b_e",
            ParamName::WBottleneck => "W_b",
            ParamName::WUnbottleneck => "W_ub",
            ParamName::WDec => "W_d",
            ParamName::BDec => "b_d",
        }
    }

    pub fn shape(self, c: &SmixaeConfig) -> Vec<usize> {
        match self {
            ParamName::WEnc => vec![c.j, c.p, c.n],
            ParamName::BEnc => vec![c.j, c.p],
            ParamName::WBottleneck => vec![c.j, c.b, c.p],
            ParamName::WUnbottleneck => vec![c.j, c.p, c.b],
            ParamName::WDec => vec![c.j, c.n, c.p],
            ParamName::BDec => vec![c.n],
        }
    }
}

/// The six trained tensors. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f32> {
    /// `[j, p, n]`
    pub w_e: Tensor<T>,
    /// `[j, p]`
    pub b_e: Tensor<T>,
    /// `[j, b, p]`
    pub w_b: Tensor<T>,
    /// `[j, p, b]`
    pub w_ub: Tensor<T>,
    /// `[j, n, p]`
    pub w_d: Tensor<T>,
    /// `[n]`
    pub b_d: Tensor<T>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(c: &SmixaeConfig) -> Self {
        Self {
            w_e: Tensor::zeros(&ParamName::WEnc.shape(c)),
            b_e: Tensor::zeros(&ParamName::BEnc.shape(c)),
            w_b: Tensor::zeros(&ParamName::WBottleneck.shape(c)),
            w_ub: Tensor::zeros(&ParamName::WUnbottleneck.shape(c)),
            w_d: Tensor::zeros(&ParamName::WDec.shape(c)),
            b_d: Tensor::zeros(&ParamName::BDec.shape(c)),
        }
    }

    pub fn get(&self, name: ParamName) -> &Tensor<T> {
        match name {
            ParamName::WEnc => &self.w_e,
            ParamName::BEnc => &self.b_e,
            ParamName::WBottleneck => &self.w_b,
            ParamName::WUnbottleneck => &self.w_ub,
            ParamName::WDec => &self.w_d,
            ParamName::BDec => &self.b_d,
        }
    }

    pub fn get_mut(&mut self, name: ParamName) -> &mut Tensor<T> {
        match name {
            ParamName::WEnc => &mut self.w_e,
            ParamName::BEnc => &mut self.b_e,
            ParamName::WBottleneck => &mut self.w_b,
            ParamName::WUnbottleneck => &mut self.w_ub,
            ParamName::WDec => &mut self.w_d,
            ParamName::BDec => &mut self.b_d,
        }
    }

    pub fn scalar_count(&self) -> usize {
        ParamName::ALL.iter().map(|&n| self.get(n).len()).sum()
    }

    pub fn check_shapes(&self, c: &SmixaeConfig) -> Result<(), ModelError> {
        for name in ParamName::ALL {
            let want = name.shape(c);
            if self.get(name).shape() != want.as_slice() {
                return Err(ModelError::Shape(format!(
                    "{} has shape {:?}, expected {want:?}",
                    name.as_str(),
                    self.get(name).shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            w_e: self.w_e.cast(),
            b_e: self.b_e.cast(),
            w_b: self.w_b.cast(),
            w_ub: self.w_ub.cast(),
            w_d: self.w_d.cast(),
            b_d: self.b_d.cast(),
        }
    }
}

/// Trained tensors plus the inference gating threshold `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmixaeParams<T = f32> {
    pub tensors: ParamSet<T>,
    pub t: f64,
}

impl<T: Real> SmixaeParams<T> {
    pub fn cast<U: Real>(&self) -> SmixaeParams<U> {
        SmixaeParams {
            tensors: self.tensors.cast(),
            t: self.t,
        }
    }

    /// `||W_d_i W_ub_i||_F` for every expert, in f64.
    pub fn decoder_norms(&self, c: &SmixaeConfig) -> Vec<f64> {
        (0..c.j)
            .map(|i| composed_decoder(self, c, i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// `W_d_i · W_ub_i` as an `n x b` row-major matrix.
pub(crate) fn composed_decoder<T: Real>(
    params: &SmixaeParams<T>,
    c: &SmixaeConfig,
    i: usize,
) -> Vec<f64> {
    let (n, p, b) = (c.n, c.p, c.b);
    let wd = &params.tensors.w_d.data()[i * n * p..(i + 1) * n * p];
    let wub = &params.tensors.w_ub.data()[i * p * b..(i + 1) * p * b];
    let mut m = vec![0.0f64; n * b];
    for row in 0..n {
        for q in 0..p {
            let a = wd[row * p + q].wide();
            if a == 0.0 {
                continue;
            }
            for col in 0..b {
                m[row * b + col] += a * wub[q * b + col].wide();
            }
        }
    }
    m
}

fn normal_vec(rng: &mut crate::numerics::Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Seeded initialization.
///
/// Encoder weights are Gaussian with standard deviation `1/sqrt(fan_in)`.
/// `W_ub` and `W_d` are Gaussian, then both are multiplied per expert by
/// `sqrt(target / ||W_d_i W_ub_i||_F)` so every composed decoder starts at
/// exactly `decoder_init_norm`. Biases and `t` start at zero.
pub fn init_params<T: Real>(config: &SmixaeConfig, seed: u64) -> Result<SmixaeParams<T>, ModelError> {
    config.validate()?;
    let c = config;
    let mut rng = seeded_rng(seed);
    let w_e = normal_vec(&mut rng, c.j * c.p * c.n, 1.0 / (c.n as f64).sqrt());
    let w_b = normal_vec(&mut rng, c.j * c.b * c.p, 1.0 / (c.p as f64).sqrt());
    let mut w_ub = normal_vec(&mut rng, c.j * c.p * c.b, 1.0 / (c.b as f64).sqrt());
    let mut w_d = normal_vec(&mut rng, c.j * c.n * c.p, 1.0 / (c.p as f64).sqrt());

    let mut probe = SmixaeParams::<f64> {
        tensors: ParamSet::zeros(c),
        t: 0.0,
    };
    probe.tensors.w_ub = Tensor::from_vec(&ParamName::WUnbottleneck.shape(c), w_ub.clone())
        .expect("shape computed from config");
    probe.tensors.w_d =
        Tensor::from_vec(&ParamName::WDec.shape(c), w_d.clone()).expect("shape computed from config");
    let norms = probe.decoder_norms(c);
    for (i, norm) in norms.into_iter().enumerate() {
        let factor = (c.decoder_init_norm / norm).sqrt();
        w_ub[i * c.p * c.b..(i + 1) * c.p * c.b]
            .iter_mut()
            .for_each(|v| *v *= factor);
        w_d[i * c.n * c.p..(i + 1) * c.n * c.p]
            .iter_mut()
            .for_each(|v| *v *= factor);
    }

    let to_t = |name: ParamName, v: Vec<f64>| {
        Tensor::from_vec(&name.shape(c), v.into_iter().map(T::lit).collect())
            .expect("shape computed from config")
    };
    Ok(SmixaeParams {
        tensors: ParamSet {
            w_e: to_t(ParamName::WEnc, w_e),
            b_e: Tensor::zeros(&ParamName::BEnc.shape(c)),
            w_b: to_t(ParamName::WBottleneck, w_b),
            w_ub: to_t(ParamName::WUnbottleneck, w_ub),
            w_d: to_t(ParamName::WDec, w_d),
            b_d: Tensor::zeros(&ParamName::BDec.shape(c)),
        },
        t: 0.0,
    })
}
