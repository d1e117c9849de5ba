use serde::{Deserialize, Serialize};

use super::forward::{check_input, decode_f64, encode_experts, gate, ExpertCache};
use super::{aux_loss, AuxNorm, GatedLatents, GatingMode, ModelError, ParamName, ParamSet};
use super::{SmixaeConfig, SmixaeParams};
use crate::numerics::{Real, Tensor};
use crate::par::map_indices;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub aux: f64,
    pub total: f64,
}

/// Loss, gradients for all six tensors, and the training-mode latents the
/// loss was computed from.
#[derive(Debug, Clone)]
pub struct StepOutput<T = f32> {
    pub loss: LossBreakdown,
    pub grads: ParamSet<T>,
    pub latents: GatedLatents<T>,
}

struct ExpertGrads {
    w_e: Vec<f64>,
    b_e: Vec<f64>,
    w_b: Vec<f64>,
    w_ub: Vec<f64>,
    w_d: Vec<f64>,
}

/// Training-mode forward pass and analytic backward pass.
///
/// The BatchTopK mask is a constant of differentiation and `t` receives no
/// gradient. In the auxiliary term the decoder-norm multiplier is detached,
/// while the scaled norm keeps its dependence on the decoder through the
/// rescaling.
pub fn loss_and_grads<T: Real>(
    params: &SmixaeParams<T>,
    x: &Tensor<T>,
    config: &SmixaeConfig,
) -> Result<StepOutput<T>, ModelError> {
    let c = config;
    check_input(params, x, c)?;
    let batch = x.rows();
    let caches = encode_experts(params, x, c)?;
    let latents: GatedLatents<T> = gate(&caches, batch, c, params.t, GatingMode::Training)?;
    let xhat = decode_f64(params, &latents);

    let n = c.n;
    let denom = (batch * n) as f64;
    let mut sq = 0.0;
    let mut g_out = vec![0.0f64; batch * n];
    for (idx, (&xv, &xh)) in x.data().iter().zip(&xhat).enumerate() {
        let diff = xv.wide() - xh;
        sq += diff * diff;
        g_out[idx] = -2.0 * diff / denom;
    }
    let mse = if batch == 0 { 0.0 } else { sq / denom };
    let aux = aux_loss(&latents, params.t, c.aux_norm);
    let loss = LossBreakdown {
        mse,
        aux,
        total: mse + c.lambda_aux * aux,
    };
    if !loss.total.is_finite() {
        return Err(ModelError::NonFinite {
            what: "loss".into(),
        });
    }

    let per_expert = map_indices(c.j, |i| {
        expert_backward(params, x, c, &caches[i], &latents, &g_out, i)
    });

    let mut b_d = vec![0.0f64; n];
    for tok in 0..batch {
        for (acc, g) in b_d.iter_mut().zip(&g_out[tok * n..(tok + 1) * n]) {
            *acc += g;
        }
    }

    let mut grads = ParamSet::<T>::zeros(c);
    let fill = |dst: &mut Tensor<T>, i: usize, src: &[f64]| {
        let len = src.len();
        for (d, s) in dst.data_mut()[i * len..(i + 1) * len].iter_mut().zip(src) {
            *d = T::lit(*s);
        }
    };
    for (i, g) in per_expert.iter().enumerate() {
        fill(&mut grads.w_e, i, &g.w_e);
        fill(&mut grads.b_e, i, &g.b_e);
        fill(&mut grads.w_b, i, &g.w_b);
        fill(&mut grads.w_ub, i, &g.w_ub);
        fill(&mut grads.w_d, i, &g.w_d);
    }
    fill(&mut grads.b_d, 0, &b_d);

    for name in ParamName::ALL {
        if !grads.get(name).all_finite() {
            return Err(ModelError::NonFinite {
                what: format!("gradient of {}", name.as_str()),
            });
        }
    }
    Ok(StepOutput {
        loss,
        grads,
        latents,
    })
}

fn expert_backward<T: Real>(
    params: &SmixaeParams<T>,
    x: &Tensor<T>,
    c: &SmixaeConfig,
    cache: &ExpertCache,
    latents: &GatedLatents<T>,
    g_out: &[f64],
    i: usize,
) -> ExpertGrads {
    let (n, p, b) = (c.n, c.p, c.b);
    let batch = x.rows();
    let tp = &params.tensors;
    let wb = &tp.w_b.data()[i * b * p..(i + 1) * b * p];
    let wub = &tp.w_ub.data()[i * p * b..(i + 1) * p * b];
    let wd = &tp.w_d.data()[i * n * p..(i + 1) * n * p];
    let dnorm = cache.decoder_norm;
    let aux_coef = c.lambda_aux * dnorm / batch.max(1) as f64;

    let mut g = ExpertGrads {
        w_e: vec![0.0; p * n],
        b_e: vec![0.0; p],
        w_b: vec![0.0; b * p],
        w_ub: vec![0.0; p * b],
        w_d: vec![0.0; n * p],
    };
    let mut g_dnorm = 0.0f64;
    let mut g_s = vec![0.0f64; b];
    let mut g_r = vec![0.0f64; b];
    let mut u = vec![0.0f64; p];
    let mut g_u = vec![0.0f64; p];
    let mut h = vec![0.0f64; p];
    let mut g_pre = vec![0.0f64; p];

    for tok in 0..batch {
        let admitted = latents.admitted(tok, i);
        let raw = &cache.raw[tok * b..(tok + 1) * b];
        let norm = latents.scaled_norms.data()[tok * c.j + i].wide();
        let aux_active = aux_coef > 0.0
            && match c.aux_norm {
                AuxNorm::Scaled => norm < params.t && norm > 0.0,
                AuxNorm::Unscaled => {
                    dnorm > 0.0 && norm / dnorm < params.t && norm > 0.0
                }
            };
        if !admitted && !aux_active {
            continue;
        }

        g_s.fill(0.0);
        if admitted {
            let z: Vec<f64> = raw.iter().map(|v| v * dnorm).collect();
            let go = &g_out[tok * n..(tok + 1) * n];
            for q in 0..p {
                u[q] = (0..b).map(|r| wub[q * b + r].wide() * z[r]).sum();
            }
            g_u.fill(0.0);
            for (row, &gv) in go.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let w = &wd[row * p..(row + 1) * p];
                let dw = &mut g.w_d[row * p..(row + 1) * p];
                for q in 0..p {
                    g_u[q] += w[q].wide() * gv;
                    dw[q] += gv * u[q];
                }
            }
            for q in 0..p {
                for r in 0..b {
                    g_s[r] += wub[q * b + r].wide() * g_u[q];
                    g.w_ub[q * b + r] += g_u[q] * z[r];
                }
            }
        }

        // s = raw · dnorm
        for r in 0..b {
            g_r[r] = g_s[r] * dnorm;
        }
        g_dnorm += g_s.iter().zip(raw).map(|(a, c)| a * c).sum::<f64>();

        if aux_active {
            match c.aux_norm {
                AuxNorm::Scaled => {
                    // d/ds of -coef·||s|| = -coef · s/||s||, then chain through s = raw·dnorm
                    for r in 0..b {
                        let ds = -aux_coef * raw[r] * dnorm / norm;
                        g_r[r] += ds * dnorm;
                        g_dnorm += ds * raw[r];
                    }
                }
                AuxNorm::Unscaled => {
                    let raw_norm = norm / dnorm;
                    for r in 0..b {
                        g_r[r] += -aux_coef * raw[r] / raw_norm;
                    }
                }
            }
        }

        let pre = &cache.pre[tok * p..(tok + 1) * p];
        for q in 0..p {
            h[q] = super::forward::leaky(pre[q], c.leaky_slope);
        }
        for q in 0..p {
            let mut acc = 0.0;
            for r in 0..b {
                acc += wb[r * p + q].wide() * g_r[r];
            }
            let slope = if pre[q] > 0.0 { 1.0 } else { c.leaky_slope };
            g_pre[q] = acc * slope;
        }
        for r in 0..b {
            for q in 0..p {
                g.w_b[r * p + q] += g_r[r] * h[q];
            }
        }
        let xr = x.row(tok);
        for q in 0..p {
            let gp = g_pre[q];
            if gp == 0.0 {
                continue;
            }
            g.b_e[q] += gp;
            let dst = &mut g.w_e[q * n..(q + 1) * n];
            for (d, xv) in dst.iter_mut().zip(xr) {
                *d += gp * xv.wide();
            }
        }
    }

    // dnorm = ||M||_F with M = W_d W_ub, so dM = (g_dnorm / dnorm) M.
    if g_dnorm != 0.0 && dnorm > 0.0 {
        let scale = g_dnorm / dnorm;
        let m = &cache.composed;
        for row in 0..n {
            for q in 0..p {
                let mut acc_d = 0.0;
                for r in 0..b {
                    let dm = scale * m[row * b + r];
                    acc_d += dm * wub[q * b + r].wide();
                    g.w_ub[q * b + r] += wd[row * p + q].wide() * dm;
                }
                g.w_d[row * p + q] += acc_d;
            }
        }
    }
    g
}
