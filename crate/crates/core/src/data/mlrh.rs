use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifold::{random_frame, ManifoldKind};
use super::shard::{ActivationShard, LabelColumn, LabelValues};
use super::DataError;
use crate::numerics::seeded_rng;

/// One feature of a synthetic activation distribution: a manifold, the seed
/// of its random isometric embedding, and an optional affine offset added
/// whenever the feature is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrhFeature {
    #[serde(flatten)]
    pub kind: ManifoldKind,
    #[serde(default)]
    pub noise_sigma: f64,
    pub embed_seed: u64,
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
    /// Explicit `n x d` embedding with orthonormal columns; overrides `embed_seed`.
    #[serde(default)]
    pub frame: Option<Vec<f64>>,
}

/// Activations built as sparse sums of embedded feature manifolds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrhSpec {
    pub features: Vec<MlrhFeature>,
    pub active_per_sample: usize,
    pub n: usize,
}

impl MlrhSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.active_per_sample == 0 {
            return Err(DataError::Contract("active_per_sample must be at least 1".into()));
        }
        if self.active_per_sample > self.features.len() {
            return Err(DataError::Contract(format!(
                "active_per_sample {} exceeds feature count {}",
                self.active_per_sample,
                self.features.len()
            )));
        }
        for (i, f) in self.features.iter().enumerate() {
            f.kind.validate()?;
            if f.kind.dim() > self.n {
                return Err(DataError::Contract(format!(
                    "feature {i} has dimension {} > n = {}",
                    f.kind.dim(),
                    self.n
                )));
            }
            if let Some(frame) = &f.frame {
                if frame.len() != self.n * f.kind.dim() {
                    return Err(DataError::Invalid(format!(
                        "feature {i} frame has {} entries, expected {}",
                        frame.len(),
                        self.n * f.kind.dim()
                    )));
                }
            }
            if let Some(off) = &f.offset {
                if off.len() != self.n {
                    return Err(DataError::Invalid(format!(
                        "feature {i} offset has length {}, expected {}",
                        off.len(),
                        self.n
                    )));
                }
            }
        }
        Ok(())
    }

    /// Embedding frame (`n x d_f`, row-major) for feature `f`.
    pub fn frame(&self, f: usize) -> Result<Vec<f64>, DataError> {
        if let Some(frame) = &self.features[f].frame {
            return Ok(frame.clone());
        }
        random_frame(self.features[f].kind.dim(), self.n, self.features[f].embed_seed)
    }

    /// Noise-free contribution of feature `f` with generating parameters `params`.
    pub fn component(&self, f: usize, frame: &[f64], params: &[f64]) -> Vec<f64> {
        let feat = &self.features[f];
        let point = feat.kind.point(params);
        let d = point.len();
        (0..self.n)
            .map(|r| {
                let v: f64 = frame[r * d..(r + 1) * d].iter().zip(&point).map(|(a, b)| a * b).sum();
                v + feat.offset.as_ref().map_or(0.0, |o| o[r])
            })
            .collect()
    }
}

/// Draws `count` rows. Labels: `f{i}_active` (0/1) and `f{i}_{param}` for
/// each generating parameter (zero when the feature is inactive).
pub fn sample_mlrh(spec: &MlrhSpec, count: usize, seed: u64) -> Result<ActivationShard, DataError> {
    spec.validate()?;
    let n = spec.n;
    let frames: Vec<Vec<f64>> = (0..spec.features.len())
        .map(|f| spec.frame(f))
        .collect::<Result<_, _>>()?;
    let mut rng = seeded_rng(seed);
    let mut rows = vec![0.0f64; count * n];
    let mut active = vec![vec![0i64; count]; spec.features.len()];
    let mut params: Vec<Vec<Vec<f64>>> = spec
        .features
        .iter()
        .map(|f| vec![vec![0.0; f.kind.param_names().len()]; count])
        .collect();

    for row in 0..count {
        let mut chosen = sample(&mut rng, spec.features.len(), spec.active_per_sample).into_vec();
        chosen.sort_unstable();
        let dst = &mut rows[row * n..(row + 1) * n];
        for f in chosen {
            let feat = &spec.features[f];
            let (p, mut point) = feat.kind.sample_one(&mut rng);
            if feat.noise_sigma > 0.0 {
                let noise = Normal::new(0.0, feat.noise_sigma)
                    .map_err(|e| DataError::Invalid(e.to_string()))?;
                point.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            let d = point.len();
            let frame = &frames[f];
            for (r, o) in dst.iter_mut().enumerate() {
                *o += frame[r * d..(r + 1) * d].iter().zip(&point).map(|(a, b)| a * b).sum::<f64>();
                if let Some(off) = &feat.offset {
                    *o += off[r];
                }
            }
            active[f][row] = 1;
            params[f][row] = p;
        }
    }

    let mut labels = Vec::new();
    for (f, feat) in spec.features.iter().enumerate() {
        labels.push(LabelColumn {
            name: format!("f{f}_active"),
            values: LabelValues::Int(active[f].clone()),
        });
        labels.extend(super::manifold::label_columns(
            &feat.kind,
            &format!("f{f}_"),
            std::mem::take(&mut params[f]),
        ));
    }
    ActivationShard::new(n, rows.into_iter().map(|v| v as f32).collect(), labels)
}
