use std::cmp::Ordering;

use super::{composed_decoder, AuxNorm, ModelError, SmixaeConfig, SmixaeParams};
use crate::numerics::{dot, Real, Tensor};
use crate::par::map_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatingMode {
    /// BatchTopK: the `B·k` largest scaled norms in the batch are admitted.
    Training,
    /// Admit exactly the experts whose scaled norm exceeds `t`.
    Inference,
}

/// Gated bottleneck activations for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedLatents<T = f32> {
    /// `[B, j, b]` scaled bottleneck vectors, zero where not admitted.
    pub z: Tensor<T>,
    /// `[B * j]`, token-major.
    pub mask: Vec<bool>,
    /// `[B, j]`
    pub scaled_norms: Tensor<T>,
    /// Smallest scaled norm among admitted entries; `None` when nothing was admitted.
    pub min_admitted_norm: Option<f64>,
    /// `[j]` composed-decoder Frobenius norms used for the rescaling.
    pub decoder_norms: Tensor<T>,
}

impl<T: Real> GatedLatents<T> {
    pub fn batch_size(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn experts(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn bottleneck(&self) -> usize {
        self.z.shape()[2]
    }

    pub fn admitted(&self, token: usize, expert: usize) -> bool {
        self.mask[token * self.experts() + expert]
    }

    /// Scaled bottleneck vector for `(token, expert)`.
    pub fn latent(&self, token: usize, expert: usize) -> &[T] {
        let (j, b) = (self.experts(), self.bottleneck());
        let off = (token * j + expert) * b;
        &self.z.data()[off..off + b]
    }

    pub fn admitted_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-expert intermediates kept for the backward pass, expert-major.
pub(crate) struct ExpertCache {
    /// `[B, p]` encoder pre-activations.
    pub pre: Vec<f64>,
    /// `[B, b]` raw bottleneck before rescaling.
    pub raw: Vec<f64>,
    /// `n x b` composed decoder.
    pub composed: Vec<f64>,
    pub decoder_norm: f64,
}

#[inline]
pub(crate) fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Admission mask for BatchTopK over a token-major `[B, j]` norm grid.
///
/// Keeps the `B·k` largest norms; ties go to the lower token index, then the
/// lower expert index. Returns the mask and the smallest admitted norm.
pub fn batch_topk(norms: &[f64], keep: usize) -> (Vec<bool>, Option<f64>) {
    let mut mask = vec![false; norms.len()];
    if keep == 0 || norms.is_empty() {
        return (mask, None);
    }
    let keep = keep.min(norms.len());
    let mut order: Vec<usize> = (0..norms.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        norms[*b].total_cmp(&norms[*a]).then(a.cmp(b))
    };
    order.select_nth_unstable_by(keep - 1, cmp);
    for &idx in &order[..keep] {
        mask[idx] = true;
    }
    (mask, Some(norms[order[keep - 1]]))
}

pub(crate) fn check_input<T: Real>(
    params: &SmixaeParams<T>,
    x: &Tensor<T>,
    c: &SmixaeConfig,
) -> Result<(), ModelError> {
    c.validate()?;
    params.tensors.check_shapes(c)?;
    if x.shape().len() != 2 || x.shape()[1] != c.n {
        return Err(ModelError::Shape(format!(
            "input batch has shape {:?}, expected [B, {}]",
            x.shape(),
            c.n
        )));
    }
    if !x.all_finite() {
        return Err(ModelError::NonFinite {
            what: "input batch".into(),
        });
    }
    Ok(())
}

/// Runs every expert's encoder on the batch.
pub(crate) fn encode_experts<T: Real>(
    params: &SmixaeParams<T>,
    x: &Tensor<T>,
    c: &SmixaeConfig,
) -> Result<Vec<ExpertCache>, ModelError> {
    let batch = x.rows();
    let (n, p, b) = (c.n, c.p, c.b);
    let t = &params.tensors;
    let caches = map_indices(c.j, |i| {
        let we = &t.w_e.data()[i * p * n..(i + 1) * p * n];
        let be = &t.b_e.data()[i * p..(i + 1) * p];
        let wb = &t.w_b.data()[i * b * p..(i + 1) * b * p];
        let composed = composed_decoder(params, c, i);
        let decoder_norm = composed.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut pre = vec![0.0f64; batch * p];
        let mut raw = vec![0.0f64; batch * b];
        let mut h = vec![0.0f64; p];
        for tok in 0..batch {
            let xr = x.row(tok);
            let pre_t = &mut pre[tok * p..(tok + 1) * p];
            for q in 0..p {
                pre_t[q] = dot(&we[q * n..(q + 1) * n], xr) + be[q].wide();
                h[q] = leaky(pre_t[q], c.leaky_slope);
            }
            for r in 0..b {
                let row = &wb[r * p..(r + 1) * p];
                raw[tok * b + r] = row.iter().zip(&h).map(|(w, hv)| w.wide() * hv).sum();
            }
        }
        ExpertCache {
            pre,
            raw,
            composed,
            decoder_norm,
        }
    });
    for (i, cache) in caches.iter().enumerate() {
        if !cache.decoder_norm.is_finite() || cache.raw.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteExpert { expert: i });
        }
    }
    Ok(caches)
}

/// Gates the encoded batch and packs the token-major latents.
pub(crate) fn gate<T: Real>(
    caches: &[ExpertCache],
    batch: usize,
    c: &SmixaeConfig,
    t: f64,
    mode: GatingMode,
) -> Result<GatedLatents<T>, ModelError> {
    let (j, b) = (c.j, c.b);
    let mut scaled = vec![T::zero(); batch * j * b];
    let mut norms_t = vec![T::zero(); batch * j];
    for (i, cache) in caches.iter().enumerate() {
        for tok in 0..batch {
            let dst = &mut scaled[(tok * j + i) * b..(tok * j + i + 1) * b];
            for r in 0..b {
                dst[r] = T::lit(cache.raw[tok * b + r] * cache.decoder_norm);
            }
            let norm = T::lit(dot(dst, dst).sqrt());
            if !norm.is_finite() {
                return Err(ModelError::NonFiniteExpert { expert: i });
            }
            norms_t[tok * j + i] = norm;
        }
    }
    let norms: Vec<f64> = norms_t.iter().map(|v| v.wide()).collect();
    let (mask, min_admitted_norm) = match mode {
        GatingMode::Training => batch_topk(&norms, batch * c.k),
        GatingMode::Inference => {
            let mask: Vec<bool> = norms.iter().map(|&v| v > t).collect();
            let min = norms
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .min_by(f64::total_cmp);
            (mask, min)
        }
    };
    for (idx, &m) in mask.iter().enumerate() {
        if !m {
            scaled[idx * b..(idx + 1) * b].fill(T::zero());
        }
    }
    let decoder_norms = caches.iter().map(|c| T::lit(c.decoder_norm)).collect();
    Ok(GatedLatents {
        z: Tensor::from_vec(&[batch, j, b], scaled).expect("sized above"),
        mask,
        scaled_norms: Tensor::from_vec(&[batch, j], norms_t).expect("sized above"),
        min_admitted_norm,
        decoder_norms: Tensor::from_vec(&[j], decoder_norms).expect("sized above"),
    })
}

/// Encoder, decoder-norm rescaling, and norm gating.
pub fn encode<T: Real>(
    params: &SmixaeParams<T>,
    x: &Tensor<T>,
    config: &SmixaeConfig,
    mode: GatingMode,
) -> Result<GatedLatents<T>, ModelError> {
    check_input(params, x, config)?;
    let caches = encode_experts(params, x, config)?;
    gate(&caches, x.rows(), config, params.t, mode)
}

pub(crate) fn decode_f64<T: Real>(params: &SmixaeParams<T>, latents: &GatedLatents<T>) -> Vec<f64> {
    let (batch, j, b) = (latents.batch_size(), latents.experts(), latents.bottleneck());
    let t = &params.tensors;
    let n = t.b_d.len();
    let p = t.w_ub.shape()[1];
    let rows = map_indices(batch, |tok| {
        let mut out: Vec<f64> = t.b_d.data().iter().map(|v| v.wide()).collect();
        let mut u = vec![0.0f64; p];
        for i in 0..j {
            if !latents.admitted(tok, i) {
                continue;
            }
            let z = latents.latent(tok, i);
            let wub = &t.w_ub.data()[i * p * b..(i + 1) * p * b];
            for q in 0..p {
                u[q] = (0..b).map(|r| wub[q * b + r].wide() * z[r].wide()).sum();
            }
            let wd = &t.w_d.data()[i * n * p..(i + 1) * n * p];
            for (row, o) in out.iter_mut().enumerate() {
                let w = &wd[row * p..(row + 1) * p];
                *o += w.iter().zip(&u).map(|(a, c)| a.wide() * c).sum::<f64>();
            }
        }
        out
    });
    rows.into_iter().flatten().collect()
}

/// `x̂ = Σ_i W_d_i (W_ub_i z_i) + b_d` over admitted experts.
pub fn decode<T: Real>(params: &SmixaeParams<T>, latents: &GatedLatents<T>) -> Tensor<T> {
    let n = params.tensors.b_d.len();
    let data = decode_f64(params, latents).into_iter().map(T::lit).collect();
    Tensor::from_vec(&[latents.batch_size(), n], data).expect("decoded rows have width n")
}

/// Encode then decode.
pub fn reconstruct<T: Real>(
    params: &SmixaeParams<T>,
    x: &Tensor<T>,
    config: &SmixaeConfig,
    mode: GatingMode,
) -> Result<(GatedLatents<T>, Tensor<T>), ModelError> {
    let latents = encode(params, x, config, mode)?;
    let xhat = decode(params, &latents);
    Ok((latents, xhat))
}

/// Mean over tokens of `Σ_i ReLU(t - ||z_i||) · ||W_d_i W_ub_i||_F`.
pub fn aux_loss<T: Real>(latents: &GatedLatents<T>, t: f64, norm: AuxNorm) -> f64 {
    let (batch, j) = (latents.batch_size(), latents.experts());
    if batch == 0 {
        return 0.0;
    }
    let dn = latents.decoder_norms.data();
    let norms = latents.scaled_norms.data();
    let mut total = 0.0;
    for tok in 0..batch {
        for i in 0..j {
            let d = dn[i].wide();
            let v = norms[tok * j + i].wide();
            let v = match norm {
                AuxNorm::Scaled => v,
                AuxNorm::Unscaled if d > 0.0 => v / d,
                AuxNorm::Unscaled => 0.0,
            };
            total += (t - v).max(0.0) * d;
        }
    }
    total / batch as f64
}

/// EMA of the minimum admitted scaled norm.
pub fn update_threshold<T: Real>(
    t: f64,
    latents: &GatedLatents<T>,
    threshold_lr: f64,
) -> Result<f64, ModelError> {
    let min = latents.min_admitted_norm.ok_or(ModelError::NoAdmitted)?;
    Ok((1.0 - threshold_lr) * t + threshold_lr * min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_config;
    use crate::model::{init_params, ParamSet};
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(rows: usize, n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = seeded_rng(seed);
        let data = (0..rows * n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Tensor::from_vec(&[rows, n], data).unwrap()
    }

    fn latents_from_norms(norms: &[f32], batch: usize, j: usize) -> GatedLatents<f32> {
        GatedLatents {
            z: Tensor::zeros(&[batch, j, 1]),
            mask: vec![false; batch * j],
            scaled_norms: Tensor::from_vec(&[batch, j], norms.to_vec()).unwrap(),
            min_admitted_norm: None,
            decoder_norms: Tensor::zeros(&[j]),
        }
    }

    #[test]
    fn topk_example_grid() {
        let norms = [0.5, 0.2, 0.9, 0.1, 0.8, 0.3];
        let (mask, min) = batch_topk(&norms, 2);
        assert_eq!(mask, vec![false, false, true, false, true, false]);
        assert_eq!(min, Some(0.8));
    }

    #[test]
    fn topk_ties_prefer_lower_indices() {
        let (mask, min) = batch_topk(&[0.0; 6], 2);
        assert_eq!(mask, vec![true, true, false, false, false, false]);
        assert_eq!(min, Some(0.0));
    }

    #[test]
    fn zero_network_still_admits_bk() {
        let mut c = small_config();
        c.leaky_slope = 0.0;
        let mut params = init_params::<f32>(&c, 3).unwrap();
        params.tensors.w_e = Tensor::zeros(params.tensors.w_e.shape());
        let x = random_batch(3, c.n, 1);
        let lat = encode(&params, &x, &c, GatingMode::Training).unwrap();
        assert!(lat.z.data().iter().all(|&v| v == 0.0));
        assert_eq!(lat.admitted_count(), 3 * c.k);
        assert_eq!(lat.min_admitted_norm, Some(0.0));
        // ties resolve in (token, expert) order over the flattened grid
        let first: Vec<bool> = (0..3 * c.j).map(|i| i < 3 * c.k).collect();
        assert_eq!(lat.mask, first);
    }

    #[test]
    fn full_gating_reconstructs_bias() {
        let c = small_config();
        let mut params = init_params::<f32>(&c, 3).unwrap();
        params.t = 1e9;
        params.tensors.b_d = Tensor::from_vec(&[c.n], (0..c.n).map(|i| i as f32).collect()).unwrap();
        let x = random_batch(4, c.n, 2);
        let (lat, xhat) = reconstruct(&params, &x, &c, GatingMode::Inference).unwrap();
        assert_eq!(lat.admitted_count(), 0);
        assert_eq!(lat.min_admitted_norm, None);
        for tok in 0..4 {
            assert_eq!(xhat.row(tok), params.tensors.b_d.data());
        }
    }

    #[test]
    fn single_expert_decode() {
        let c = small_config();
        let params = init_params::<f64>(&c, 5).unwrap();
        let x = random_batch(1, c.n, 9).cast::<f64>();
        let mut lat = encode(&params, &x, &c, GatingMode::Training).unwrap();
        // keep only expert 1
        for i in 0..c.j {
            lat.mask[i] = i == 1;
            if i != 1 {
                let b = c.b;
                lat.z.data_mut()[i * b..(i + 1) * b].fill(0.0);
            }
        }
        let z = lat.latent(0, 1).to_vec();
        let t = &params.tensors;
        let (n, p, b) = (c.n, c.p, c.b);
        let u: Vec<f64> = (0..p)
            .map(|q| (0..b).map(|r| t.w_ub.data()[(p + q) * b + r] * z[r]).sum())
            .collect();
        let expected: Vec<f64> = (0..n)
            .map(|row| (0..p).map(|q| t.w_d.data()[(n + row) * p + q] * u[q]).sum())
            .collect();
        let xhat = decode(&params, &lat);
        for (a, e) in xhat.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        // n=2, j=2, p=1, b=1, all weights one, slope 0.
        let c = SmixaeConfig {
            n: 2,
            j: 2,
            p: 1,
            b: 1,
            k: 2,
            leaky_slope: 0.0,
            ..small_config()
        };
        let ones = |shape: &[usize]| {
            Tensor::from_vec(shape, vec![1.0f64; shape.iter().product()]).unwrap()
        };
        let params = SmixaeParams {
            tensors: ParamSet {
                w_e: ones(&[2, 1, 2]),
                b_e: ones(&[2, 1]),
                w_b: ones(&[2, 1, 1]),
                w_ub: ones(&[2, 1, 1]),
                w_d: ones(&[2, 2, 1]),
                b_d: ones(&[2]),
            },
            t: 0.0,
        };
        // x = (1, 2): pre = 1 + 2 + 1 = 4, raw = 4, ||W_d W_ub||_F = sqrt(2),
        // z = 4 sqrt(2) per expert, u = z, x̂_d = 2 · 4 sqrt(2) + 1.
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let (lat, xhat) = reconstruct(&params, &x, &c, GatingMode::Training).unwrap();
        let z = 4.0 * 2f64.sqrt();
        assert!((lat.latent(0, 0)[0] - z).abs() < 1e-12);
        let want = 2.0 * z + 1.0;
        assert!((xhat.data()[0] - want).abs() < 1e-12);
        assert!((xhat.data()[1] - want).abs() < 1e-12);
    }

    #[test]
    fn aux_loss_examples() {
        let mut lat = latents_from_norms(&[0.5, 1.2], 1, 2);
        lat.decoder_norms = Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap();
        assert!((aux_loss(&lat, 1.0, AuxNorm::Scaled) - 1.0).abs() < 1e-7);
        assert_eq!(aux_loss(&lat, 0.0, AuxNorm::Scaled), 0.0);
        assert_eq!(aux_loss(&lat, 0.4, AuxNorm::Scaled), 0.0);
        // unscaled: raw norms 0.25 and 0.4
        let want = (1.0 - 0.25) * 2.0 + (1.0 - 0.4) * 3.0;
        assert!((aux_loss(&lat, 1.0, AuxNorm::Unscaled) - want).abs() < 1e-6);
    }

    #[test]
    fn threshold_ema() {
        let mut lat = latents_from_norms(&[0.7], 1, 1);
        lat.min_admitted_norm = Some(0.7);
        assert!((update_threshold(0.5, &lat, 0.1).unwrap() - 0.52).abs() < 1e-12);
        assert_eq!(update_threshold(0.5, &lat, 1.0).unwrap(), 0.7);
        assert_eq!(update_threshold(0.7, &lat, 0.3).unwrap(), 0.7);
        lat.min_admitted_norm = None;
        assert!(matches!(update_threshold(0.5, &lat, 0.1), Err(ModelError::NoAdmitted)));
    }

    #[test]
    fn rejects_wrong_width() {
        let c = small_config();
        let params = init_params::<f32>(&c, 1).unwrap();
        let x = random_batch(2, c.n + 1, 1);
        assert!(matches!(
            encode(&params, &x, &c, GatingMode::Training),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn non_finite_expert_is_named() {
        let c = small_config();
        let mut params = init_params::<f32>(&c, 1).unwrap();
        let p = c.p;
        params.tensors.b_e.data_mut()[2 * p] = f32::INFINITY;
        let x = random_batch(2, c.n, 1);
        assert!(matches!(
            encode(&params, &x, &c, GatingMode::Training),
            Err(ModelError::NonFiniteExpert { expert: 2 })
        ));
    }

    fn permute_experts(params: &SmixaeParams<f64>, perm: &[usize], c: &SmixaeConfig) -> SmixaeParams<f64> {
        let mut out = params.clone();
        for (dst, &src) in perm.iter().enumerate() {
            for name in crate::model::ParamName::ALL {
                if name == crate::model::ParamName::BDec {
                    continue;
                }
                let block = out.tensors.get(name).len() / c.j;
                let from = params.tensors.get(name).data()[src * block..(src + 1) * block].to_vec();
                out.tensors.get_mut(name).data_mut()[dst * block..(dst + 1) * block]
                    .copy_from_slice(&from);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn training_admits_exactly_bk(seed in 0u64..10_000, batch in 1usize..12, k in 1usize..4) {
            let c = SmixaeConfig { k, ..small_config() };
            let params = init_params::<f32>(&c, seed).unwrap();
            let x = random_batch(batch, c.n, seed ^ 0xabc);
            let lat = encode(&params, &x, &c, GatingMode::Training).unwrap();
            prop_assert_eq!(lat.admitted_count(), batch * k);
            let min = lat.min_admitted_norm.unwrap();
            let admitted_min = lat.scaled_norms.data().iter().zip(&lat.mask)
                .filter(|(_, &m)| m).map(|(v, _)| *v as f64).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(min, admitted_min);
            for (idx, &m) in lat.mask.iter().enumerate() {
                let row = &lat.z.data()[idx * c.b..(idx + 1) * c.b];
                if !m { prop_assert!(row.iter().all(|&v| v == 0.0)); }
            }
        }

        #[test]
        fn expert_permutation_invariance(seed in 0u64..10_000, rot in 1usize..4) {
            let c = small_config();
            let params = init_params::<f64>(&c, seed).unwrap();
            let perm: Vec<usize> = (0..c.j).map(|i| (i + rot) % c.j).collect();
            let permuted = permute_experts(&params, &perm, &c);
            let x = random_batch(5, c.n, seed + 1).cast::<f64>();
            let (_, a) = reconstruct(&params, &x, &c, GatingMode::Training).unwrap();
            let (_, b) = reconstruct(&permuted, &x, &c, GatingMode::Training).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()));
            }
        }

        // W_ub, W_d by c and W_b by c^-4: the decoder norm grows by c², the
        // scaled bottleneck shrinks by c², and every decoded term is unchanged.
        #[test]
        fn decoder_rescaling_invariance(seed in 0u64..10_000, expert in 0usize..4, c in 0.25f64..4.0) {
            let cfg = small_config();
            let params = init_params::<f64>(&cfg, seed).unwrap();
            let mut scaled = params.clone();
            for (name, f) in [
                (crate::model::ParamName::WUnbottleneck, c),
                (crate::model::ParamName::WDec, c),
                (crate::model::ParamName::WBottleneck, c.powi(-4)),
            ] {
                let block = scaled.tensors.get(name).len() / cfg.j;
                scaled.tensors.get_mut(name).data_mut()[expert * block..(expert + 1) * block]
                    .iter_mut()
                    .for_each(|v| *v *= f);
            }
            let x = random_batch(6, cfg.n, seed + 7).cast::<f64>();
            let (la, a) = reconstruct(&params, &x, &cfg, GatingMode::Inference).unwrap();
            let (lb, b) = reconstruct(&scaled, &x, &cfg, GatingMode::Inference).unwrap();
            prop_assert_eq!(&la.mask, &lb.mask);
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
            }
            let tok_norm = |l: &GatedLatents<f64>, t: usize| l.scaled_norms.data()[t * cfg.j + expert];
            for t in 0..6 {
                let want = tok_norm(&la, t) / (c * c);
                prop_assert!((tok_norm(&lb, t) - want).abs() <= 1e-9 * (1.0 + want));
            }
        }

        #[test]
        fn aux_loss_monotone_and_non_negative(
            norms in proptest::collection::vec(0.0f32..3.0, 4),
            bump in 0.0f32..1.0,
            idx in 0usize..4,
            t in 0.0f64..3.0,
        ) {
            let mut lat = latents_from_norms(&norms, 2, 2);
            lat.decoder_norms = Tensor::from_vec(&[2], vec![0.5, 2.0]).unwrap();
            let before = aux_loss(&lat, t, AuxNorm::Scaled);
            lat.scaled_norms.data_mut()[idx] += bump;
            let after = aux_loss(&lat, t, AuxNorm::Scaled);
            prop_assert!(before >= 0.0 && after >= 0.0);
            prop_assert!(after <= before + 1e-12);
        }
    }
}
