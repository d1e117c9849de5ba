//! Reconstruction and sparsity metrics over an activation stream, and the
//! cross-entropy recovery score from externally computed loss triples.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ActivationShard;
use crate::model::{reconstruct, GatedLatents, GatingMode, ModelError, Normalization, SmixaeConfig, SmixaeParams};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation stream")]
    Empty,
    #[error("input has zero variance; explained variance is undefined")]
    ZeroVariance,
    #[error("degenerate cross-entropy triples: mean ablated loss equals mean clean loss")]
    DegenerateCe,
    #[error("non-finite cross-entropy value on row {row}")]
    NonFiniteCe { row: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tokens: u64,
    /// Mean nonzero coordinates of the flattened `j·b` latent per token.
    pub l0_flat: f64,
    /// Mean admitted experts per token.
    pub l0_expert: f64,
    /// Fraction of experts admitted at least once over the stream.
    pub frac_alive: f64,
    pub explained_variance: f64,
    /// Mean over tokens of the per-coordinate squared error.
    pub mse_raw: f64,
    /// `Σ‖x−x̂‖² / Σ‖x−x̄‖²`.
    pub mse_normalized: f64,
    pub cosine_sim_mean: f64,
    /// Tokens left out of the cosine mean because `x` or `x̂` was zero.
    pub cosine_skipped: u64,
    pub ce_score: Option<f64>,
}

/// Streaming per-coordinate mean and sum of squared deviations.
#[derive(Debug, Clone, PartialEq)]
struct Moments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
        }
    }

    fn push(&mut self, row: impl Iterator<Item = f64>) {
        self.count += 1;
        let c = self.count as f64;
        for ((v, m), s) in row.zip(&mut self.mean).zip(&mut self.m2) {
            let d = v - *m;
            *m += d / c;
            *s += d * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        for d in 0..self.mean.len() {
            let delta = other.mean[d] - self.mean[d];
            self.mean[d] += delta * nb / total;
            self.m2[d] += other.m2[d] + delta * delta * na * nb / total;
        }
        self.count += other.count;
    }

    fn total_m2(&self) -> f64 {
        self.m2.iter().sum()
    }
}

/// Mergeable accumulator behind [`MetricsReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    n: usize,
    x: Moments,
    resid: Moments,
    sq_err: f64,
    cos_sum: f64,
    cos_count: u64,
    cos_skipped: u64,
    nonzero: u64,
    admitted: u64,
    fired: Vec<bool>,
}

impl MetricsAccumulator {
    pub fn new(n: usize, j: usize) -> Self {
        Self {
            n,
            x: Moments::new(n),
            resid: Moments::new(n),
            sq_err: 0.0,
            cos_sum: 0.0,
            cos_count: 0,
            cos_skipped: 0,
            nonzero: 0,
            admitted: 0,
            fired: vec![false; j],
        }
    }

    pub fn tokens(&self) -> u64 {
        self.x.count
    }

    /// Adds a batch of inputs and reconstructions, and optionally the gated
    /// latents they came from.
    pub fn update(
        &mut self,
        x: &Tensor<f32>,
        xhat: &Tensor<f32>,
        latents: Option<&GatedLatents<f32>>,
    ) -> Result<(), EvalError> {
        if x.shape() != xhat.shape() || x.shape().last() != Some(&self.n) {
            return Err(EvalError::Shape(format!(
                "x {:?} and x̂ {:?} must both be [B, {}]",
                x.shape(),
                xhat.shape(),
                self.n
            )));
        }
        for r in 0..x.rows() {
            let (xr, hr) = (x.row(r), xhat.row(r));
            self.x.push(xr.iter().map(|&v| v as f64));
            self.resid.push(xr.iter().zip(hr).map(|(&a, &b)| a as f64 - b as f64));
            let (mut dot, mut nx, mut nh, mut se) = (0.0, 0.0, 0.0, 0.0);
            for (&a, &b) in xr.iter().zip(hr) {
                let (a, b) = (a as f64, b as f64);
                dot += a * b;
                nx += a * a;
                nh += b * b;
                se += (a - b) * (a - b);
            }
            self.sq_err += se;
            if nx > 0.0 && nh > 0.0 {
                self.cos_sum += dot / (nx.sqrt() * nh.sqrt());
                self.cos_count += 1;
            } else {
                self.cos_skipped += 1;
            }
        }
        if let Some(l) = latents {
            if l.batch_size() != x.rows() || l.experts() != self.fired.len() {
                return Err(EvalError::Shape(format!(
                    "latents for {} tokens x {} experts, expected {} x {}",
                    l.batch_size(),
                    l.experts(),
                    x.rows(),
                    self.fired.len()
                )));
            }
            let j = self.fired.len();
            for (idx, &m) in l.mask.iter().enumerate() {
                if m {
                    self.admitted += 1;
                    self.fired[idx % j] = true;
                }
            }
            self.nonzero += l.z.data().iter().filter(|&&v| v != 0.0).count() as u64;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.x.merge(&other.x);
        self.resid.merge(&other.resid);
        self.sq_err += other.sq_err;
        self.cos_sum += other.cos_sum;
        self.cos_count += other.cos_count;
        self.cos_skipped += other.cos_skipped;
        self.nonzero += other.nonzero;
        self.admitted += other.admitted;
        for (a, &b) in self.fired.iter_mut().zip(&other.fired) {
            *a |= b;
        }
    }

    pub fn finish(&self) -> Result<MetricsReport, EvalError> {
        let tokens = self.x.count;
        if tokens == 0 {
            return Err(EvalError::Empty);
        }
        let var_x = self.x.total_m2();
        if var_x <= 0.0 {
            return Err(EvalError::ZeroVariance);
        }
        let tf = tokens as f64;
        let j = self.fired.len();
        Ok(MetricsReport {
            tokens,
            l0_flat: self.nonzero as f64 / tf,
            l0_expert: self.admitted as f64 / tf,
            frac_alive: if j == 0 {
                0.0
            } else {
                self.fired.iter().filter(|&&f| f).count() as f64 / j as f64
            },
            explained_variance: 1.0 - self.resid.total_m2() / var_x,
            mse_raw: self.sq_err / (tf * self.n as f64),
            mse_normalized: self.sq_err / var_x,
            cosine_sim_mean: if self.cos_count == 0 {
                0.0
            } else {
                self.cos_sum / self.cos_count as f64
            },
            cosine_skipped: self.cos_skipped,
            ce_score: None,
        })
    }
}

/// Consecutive, unshuffled batches of at most `size` rows over `shards`.
pub fn sequential_batches(shards: &[ActivationShard], size: usize) -> impl Iterator<Item = Tensor<f32>> + '_ {
    let size = size.max(1);
    shards.iter().flat_map(move |s| {
        (0..s.count()).step_by(size).map(move |start| {
            let end = (start + size).min(s.count());
            let data: Vec<f32> = (start..end).flat_map(|r| s.row(r).iter().copied()).collect();
            Tensor::from_vec(&[end - start, s.n()], data).expect("whole rows")
        })
    })
}

/// Inference-mode metrics over `batches`. With `normalization`, each batch
/// is normalized first and metrics are measured in normalized units.
pub fn core_metrics<I>(
    params: &SmixaeParams<f32>,
    config: &SmixaeConfig,
    batches: I,
    normalization: Option<&Normalization>,
) -> Result<MetricsReport, EvalError>
where
    I: IntoIterator<Item = Tensor<f32>>,
{
    let mut acc = MetricsAccumulator::new(config.n, config.j);
    for mut batch in batches {
        if let Some(norm) = normalization {
            norm.apply(&mut batch);
        }
        let (latents, xhat) = reconstruct(params, &batch, config, GatingMode::Inference)?;
        acc.update(&batch, &xhat, Some(&latents))?;
    }
    acc.finish()
}

/// Per-token cross-entropy losses: unmodified, with the layer replaced by the
/// reconstruction, and with the layer zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeTriple {
    pub ce_clean: f64,
    pub ce_patched: f64,
    pub ce_ablated: f64,
}

/// Fraction of the clean-to-ablated loss gap recovered by the patch.
pub fn ce_score(triples: &[CeTriple]) -> Result<f64, EvalError> {
    if triples.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut clean, mut patched, mut ablated) = (0.0, 0.0, 0.0);
    for (row, t) in triples.iter().enumerate() {
        if !(t.ce_clean.is_finite() && t.ce_patched.is_finite() && t.ce_ablated.is_finite()) {
            return Err(EvalError::NonFiniteCe { row });
        }
        clean += t.ce_clean;
        patched += t.ce_patched;
        ablated += t.ce_ablated;
    }
    let m = triples.len() as f64;
    let (clean, patched, ablated) = (clean / m, patched / m, ablated / m);
    let den = ablated - clean;
    if den.abs() <= 1e-12 * clean.abs().max(ablated.abs()).max(1.0) {
        return Err(EvalError::DegenerateCe);
    }
    Ok((ablated - patched) / den)
}

pub fn read_ce_triples(path: &Path) -> Result<Vec<CeTriple>, EvalError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["ce_clean", "ce_patched", "ce_ablated"] {
        return Err(EvalError::Shape(format!(
            "expected header ce_clean,ce_patched,ce_ablated, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_ce_triples(path: &Path, triples: &[CeTriple]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for t in triples {
        w.serialize(t)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, AuxNorm};
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn t(rows: usize, n: usize, v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[rows, n], v.to_vec()).unwrap()
    }

    fn noise(rows: usize, n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = seeded_rng(seed);
        let d = (0..rows * n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Tensor::from_vec(&[rows, n], d).unwrap()
    }

    fn report(x: &Tensor<f32>, xhat: &Tensor<f32>) -> MetricsReport {
        let mut acc = MetricsAccumulator::new(x.shape()[1], 1);
        acc.update(x, xhat, None).unwrap();
        acc.finish().unwrap()
    }

    #[test]
    fn identity_reconstruction() {
        let x = noise(50, 6, 1);
        let r = report(&x, &x);
        assert!((r.explained_variance - 1.0).abs() < 1e-12);
        assert_eq!(r.mse_raw, 0.0);
        assert!((r.cosine_sim_mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mean_predictor() {
        let x = noise(40, 3, 2);
        let mut mean = [0.0f64; 3];
        for r in 0..40 {
            for d in 0..3 {
                mean[d] += x.row(r)[d] as f64 / 40.0;
            }
        }
        let xhat = Tensor::from_vec(&[40, 3], (0..40).flat_map(|_| mean.map(|m| m as f32)).collect()).unwrap();
        let r = report(&x, &xhat);
        assert!(r.explained_variance.abs() < 1e-6, "{}", r.explained_variance);
        assert!((r.mse_normalized - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_three_token_table() {
        // x = (1,0), (0,1), (1,1); x̂ = (1,0), (0,0), (2,2)
        let x = t(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let xhat = t(3, 2, &[1.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        let r = report(&x, &xhat);
        // residuals (0,0), (0,1), (-1,-1): squared errors 0, 1, 2
        assert!((r.mse_raw - 3.0 / 6.0).abs() < 1e-12);
        // var(x) per coordinate: 2/9 each -> population sums 2/3 + 2/3 = 4/3
        // residual sums of squared deviations: d0 {0,0,-1} -> 2/3, d1 {0,1,-1} -> 2
        assert!((r.explained_variance - (1.0 - (2.0 / 3.0 + 2.0) / (4.0 / 3.0))).abs() < 1e-12);
        assert!((r.mse_normalized - 3.0 / (4.0 / 3.0)).abs() < 1e-12);
        // cos: token 0 -> 1, token 1 skipped (x̂ = 0), token 2 -> 1
        assert_eq!(r.cosine_skipped, 1);
        assert!((r.cosine_sim_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_stream_is_an_error() {
        let acc = MetricsAccumulator::new(3, 2);
        assert!(matches!(acc.finish(), Err(EvalError::Empty)));
    }

    #[test]
    fn ce_examples() {
        let same = |c, p, a| vec![CeTriple { ce_clean: c, ce_patched: p, ce_ablated: a }; 5];
        assert_eq!(ce_score(&same(1.0, 1.0, 3.0)).unwrap(), 1.0);
        assert_eq!(ce_score(&same(1.0, 3.0, 3.0)).unwrap(), 0.0);
        assert!((ce_score(&same(1.0, 1.5, 3.0)).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(ce_score(&same(2.0, 1.0, 2.0)), Err(EvalError::DegenerateCe)));
        assert!(matches!(ce_score(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn ce_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ce.csv");
        let triples = vec![
            CeTriple { ce_clean: 1.25, ce_patched: 1.5, ce_ablated: 3.0 },
            CeTriple { ce_clean: 0.1, ce_patched: 0.2, ce_ablated: 7.5 },
        ];
        write_ce_triples(&path, &triples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ce_clean,ce_patched,ce_ablated\n"));
        assert_eq!(read_ce_triples(&path).unwrap(), triples);
        std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
        assert!(read_ce_triples(&path).is_err());
    }

    #[test]
    fn l0_flat_is_b_times_l0_expert() {
        let cfg = SmixaeConfig {
            n: 10,
            j: 6,
            p: 4,
            b: 3,
            k: 2,
            lambda_aux: 0.0,
            threshold_lr: 0.1,
            leaky_slope: 1e-4,
            decoder_init_norm: 0.1,
            aux_norm: AuxNorm::Scaled,
        };
        let mut params = init_params::<f32>(&cfg, 4).unwrap();
        params.t = 0.01;
        let x = noise(64, 10, 5);
        let r = core_metrics(&params, &cfg, [x], None).unwrap();
        assert!(r.l0_expert > 0.0);
        assert!((r.l0_flat - 3.0 * r.l0_expert).abs() < 1e-12);
        assert!(r.l0_flat <= (cfg.j * cfg.b) as f64);
        assert!((0.0..=1.0).contains(&r.frac_alive));
    }

    proptest! {
        #[test]
        fn chunking_invariance(seed in 0u64..1000, split in 1usize..63) {
            let x = noise(64, 4, seed);
            let xhat = noise(64, 4, seed + 1);
            let whole = report(&x, &xhat);
            let mut a = MetricsAccumulator::new(4, 1);
            let mut b = MetricsAccumulator::new(4, 1);
            let rows = |t: &Tensor<f32>, lo: usize, hi: usize| {
                Tensor::from_vec(&[hi - lo, 4], t.data()[lo * 4..hi * 4].to_vec()).unwrap()
            };
            a.update(&rows(&x, 0, split), &rows(&xhat, 0, split), None).unwrap();
            b.update(&rows(&x, split, 64), &rows(&xhat, split, 64), None).unwrap();
            a.merge(&b);
            let merged = a.finish().unwrap();
            let close = |p: f64, q: f64| (p - q).abs() <= 1e-6 * p.abs().max(q.abs()).max(1e-12);
            prop_assert!(close(whole.explained_variance, merged.explained_variance));
            prop_assert!(close(whole.mse_raw, merged.mse_raw));
            prop_assert!(close(whole.mse_normalized, merged.mse_normalized));
            prop_assert!(close(whole.cosine_sim_mean, merged.cosine_sim_mean));
            prop_assert_eq!(whole.tokens, merged.tokens);
        }

        #[test]
        fn ce_shift_invariance(c in 0.0f64..5.0, gap in 0.5f64..5.0, frac in 0.0f64..1.0, shift in -10.0f64..10.0) {
            let tr = |s: f64| vec![CeTriple { ce_clean: c + s, ce_patched: c + frac * gap + s, ce_ablated: c + gap + s }];
            let a = ce_score(&tr(0.0)).unwrap();
            let b = ce_score(&tr(shift)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
