//! Browser demo: sample a toy manifold, train a small SMIXAE on it step by
//! step, and plot the learning-rate schedule.
//!
//! The plain-Rust functions carry the logic; `#[wasm_bindgen]` wrappers only
//! convert errors to strings for JavaScript.

use smixae::data::{random_frame, sample_manifold, ManifoldKind, ManifoldSpec};
use smixae::model::{
    encode, init_params, loss_and_grads, reconstruct, update_threshold, AuxNorm, GatingMode, ParamName,
    SmixaeConfig, SmixaeParams,
};
use smixae::numerics::{adam_step, derive_seed, seeded_rng, wsd_lr, AdamConfig, AdamState, LrSchedule, Tensor};
use wasm_bindgen::prelude::*;

const AMBIENT: usize = 16;
const POINTS: usize = 3000;
const BATCH: usize = 128;

fn kind_from_name(name: &str) -> Result<ManifoldKind, String> {
    match name {
        "torus" => Ok(ManifoldKind::Torus {
            major_radius: 2.0,
            minor_radius: 0.75,
        }),
        "helix" => Ok(ManifoldKind::Helix {
            radius: 1.0,
            pitch: 1.0,
            turns: 3.0,
        }),
        "circle" => Ok(ManifoldKind::Circle { radius: 1.5 }),
        _ => Err(format!("unknown manifold '{name}' (torus, helix or circle)")),
    }
}

/// Intrinsic points padded to three coordinates, flattened `[x, y, z, ...]`.
fn points_xyz(points: &Tensor<f64>) -> Vec<f32> {
    let d = points.shape()[1];
    let mut out = Vec::with_capacity(points.rows() * 3);
    for r in 0..points.rows() {
        let row = points.row(r);
        for c in 0..3 {
            out.push(if c < d { row[c] as f32 } else { 0.0 });
        }
    }
    out
}

pub fn sample_points(kind: &str, count: usize, noise: f64, seed: u64) -> Result<Vec<f32>, String> {
    let spec = ManifoldSpec {
        kind: kind_from_name(kind)?,
        noise_sigma: noise,
        ambient_dim: 3,
    };
    let sample = sample_manifold(&spec, count, seed).map_err(|e| e.to_string())?;
    Ok(points_xyz(&sample.points))
}

/// Learning rate at `points` evenly spaced steps of a warmup-stable-decay
/// schedule.
pub fn schedule_curve(
    total_steps: u64,
    warmup_steps: u64,
    decay_fraction: f64,
    base_lr: f64,
    points: usize,
) -> Result<Vec<f64>, String> {
    let sched = LrSchedule {
        base_lr,
        warmup_steps,
        total_steps,
        decay_fraction,
    };
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let step = (i as u64 * total_steps) / (points as u64 - 1);
            wsd_lr(step, &sched).map_err(|e| e.to_string())
        })
        .collect()
}

/// A SMIXAE with 8 experts, one admitted per token, learning a manifold
/// embedded in 16 dimensions.
#[wasm_bindgen]
pub struct ToyTrainer {
    config: SmixaeConfig,
    params: SmixaeParams<f32>,
    states: Vec<AdamState<f32>>,
    adam: AdamConfig,
    lr: f64,
    data: Tensor<f32>,
    /// `AMBIENT x d` orthonormal frame used for the embedding.
    frame: Vec<f64>,
    dim: usize,
    cursor: usize,
    order: Vec<usize>,
    rng: smixae::numerics::Rng,
    steps: u64,
    last_mse: f64,
}

impl ToyTrainer {
    pub fn create(kind: &str, seed: u64) -> Result<ToyTrainer, String> {
        let kind = kind_from_name(kind)?;
        let dim = kind.dim();
        let spec = ManifoldSpec {
            kind,
            noise_sigma: 0.0,
            ambient_dim: AMBIENT,
        };
        let sample = sample_manifold(&spec, POINTS, derive_seed(seed, 0)).map_err(|e| e.to_string())?;
        let frame = random_frame(dim, AMBIENT, derive_seed(seed, 1)).map_err(|e| e.to_string())?;
        let mut rows = Vec::with_capacity(POINTS * AMBIENT);
        for r in 0..POINTS {
            let p = sample.points.row(r);
            for a in 0..AMBIENT {
                let v: f64 = (0..dim).map(|c| frame[a * dim + c] * p[c]).sum();
                rows.push(v as f32);
            }
        }
        let config = SmixaeConfig {
            n: AMBIENT,
            j: 8,
            p: 16,
            b: 3,
            k: 1,
            lambda_aux: 0.0,
            threshold_lr: 0.1,
            leaky_slope: 1e-4,
            decoder_init_norm: 0.1,
            aux_norm: AuxNorm::Scaled,
        };
        let params = init_params(&config, derive_seed(seed, 2)).map_err(|e| e.to_string())?;
        let states = ParamName::ALL
            .iter()
            .map(|&name| AdamState::new(&name.shape(&config)))
            .collect();
        Ok(ToyTrainer {
            config,
            params,
            states,
            adam: AdamConfig::default(),
            lr: 3e-3,
            data: Tensor::from_vec(&[POINTS, AMBIENT], rows).expect("sized above"),
            frame,
            dim,
            cursor: POINTS,
            order: (0..POINTS).collect(),
            rng: seeded_rng(derive_seed(seed, 3)),
            steps: 0,
            last_mse: f64::NAN,
        })
    }

    fn next_batch(&mut self) -> Tensor<f32> {
        use rand::seq::SliceRandom;
        if self.cursor + BATCH > POINTS {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let mut rows = Vec::with_capacity(BATCH * AMBIENT);
        for &i in &self.order[self.cursor..self.cursor + BATCH] {
            rows.extend_from_slice(self.data.row(i));
        }
        self.cursor += BATCH;
        Tensor::from_vec(&[BATCH, AMBIENT], rows).expect("sized above")
    }

    pub fn train(&mut self, steps: u32) -> Result<f64, String> {
        for _ in 0..steps {
            let batch = self.next_batch();
            let out = loss_and_grads(&self.params, &batch, &self.config).map_err(|e| e.to_string())?;
            for (name, state) in ParamName::ALL.into_iter().zip(self.states.iter_mut()) {
                adam_step(self.params.tensors.get_mut(name), out.grads.get(name), state, self.lr, &self.adam)
                    .map_err(|e| e.to_string())?;
            }
            self.params.t =
                update_threshold(self.params.t, &out.latents, self.config.threshold_lr).map_err(|e| e.to_string())?;
            self.steps += 1;
            self.last_mse = out.loss.mse;
        }
        Ok(self.last_mse)
    }

    fn view(&self, count: usize) -> Tensor<f32> {
        let count = count.min(POINTS);
        Tensor::from_vec(&[count, AMBIENT], self.data.data()[..count * AMBIENT].to_vec()).expect("whole rows")
    }

    /// Inference-mode reconstructions of the first `count` points, mapped
    /// back to intrinsic coordinates.
    pub fn reconstruction_points(&self, count: usize) -> Result<Vec<f32>, String> {
        let (_, xhat) = reconstruct(&self.params, &self.view(count), &self.config, GatingMode::Inference)
            .map_err(|e| e.to_string())?;
        let d = self.dim;
        let mut pts = Vec::with_capacity(xhat.rows() * d);
        for r in 0..xhat.rows() {
            let row = xhat.row(r);
            for c in 0..d {
                pts.push((0..AMBIENT).map(|a| self.frame[a * d + c] * row[a] as f64).sum::<f64>());
            }
        }
        Ok(points_xyz(&Tensor::from_vec(&[xhat.rows(), d], pts).expect("sized above")))
    }

    /// Expert with the largest admitted norm for each of the first `count`
    /// points, or `j` when no expert passes the threshold.
    pub fn assignments(&self, count: usize) -> Result<Vec<u32>, String> {
        let lat = encode(&self.params, &self.view(count), &self.config, GatingMode::Inference)
            .map_err(|e| e.to_string())?;
        let j = self.config.j;
        Ok((0..lat.batch_size())
            .map(|t| {
                (0..j)
                    .filter(|&i| lat.admitted(t, i))
                    .max_by(|&a, &b| {
                        let n = lat.scaled_norms.data();
                        n[t * j + a].total_cmp(&n[t * j + b])
                    })
                    .unwrap_or(j) as u32
            })
            .collect())
    }

    /// Explained variance of inference-mode reconstructions over all points.
    pub fn explained_variance(&self) -> Result<f64, String> {
        let (_, xhat) =
            reconstruct(&self.params, &self.data, &self.config, GatingMode::Inference).map_err(|e| e.to_string())?;
        let mut mean = vec![0.0f64; AMBIENT];
        for r in 0..POINTS {
            for (m, &v) in mean.iter_mut().zip(self.data.row(r)) {
                *m += v as f64 / POINTS as f64;
            }
        }
        let (mut resid, mut total) = (0.0, 0.0);
        for r in 0..POINTS {
            for ((&x, &h), m) in self.data.row(r).iter().zip(xhat.row(r)).zip(&mean) {
                resid += (x as f64 - h as f64).powi(2);
                total += (x as f64 - m).powi(2);
            }
        }
        Ok(1.0 - resid / total)
    }
}

#[wasm_bindgen]
impl ToyTrainer {
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, seed: u32) -> Result<ToyTrainer, JsValue> {
        Self::create(kind, seed as u64).map_err(|e| JsValue::from_str(&e))
    }

    /// Runs `steps` optimizer steps and returns the last batch MSE.
    #[wasm_bindgen(js_name = step)]
    pub fn step_js(&mut self, steps: u32) -> Result<f64, JsValue> {
        self.train(steps).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = reconstruction)]
    pub fn reconstruction_js(&self, count: usize) -> Result<Vec<f32>, JsValue> {
        self.reconstruction_points(count).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = originals)]
    pub fn originals_js(&self, count: usize) -> Vec<f32> {
        let view = self.view(count);
        let d = self.dim;
        let mut pts = Vec::with_capacity(view.rows() * d);
        for r in 0..view.rows() {
            for c in 0..d {
                pts.push((0..AMBIENT).map(|a| self.frame[a * d + c] * view.row(r)[a] as f64).sum::<f64>());
            }
        }
        points_xyz(&Tensor::from_vec(&[view.rows(), d], pts).expect("sized above"))
    }

    #[wasm_bindgen(js_name = assignments)]
    pub fn assignments_js(&self, count: usize) -> Result<Vec<u32>, JsValue> {
        self.assignments(count).map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(js_name = explainedVariance)]
    pub fn explained_variance_js(&self) -> Result<f64, JsValue> {
        self.explained_variance().map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> f64 {
        self.steps as f64
    }

    #[wasm_bindgen(getter)]
    pub fn threshold(&self) -> f64 {
        self.params.t
    }
}

#[wasm_bindgen(js_name = samplePoints)]
pub fn sample_points_js(kind: &str, count: usize, noise: f64, seed: u32) -> Result<Vec<f32>, JsValue> {
    sample_points(kind, count, noise, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = scheduleCurve)]
pub fn schedule_curve_js(
    total_steps: u32,
    warmup_steps: u32,
    decay_fraction: f64,
    base_lr: f64,
    points: usize,
) -> Result<Vec<f64>, JsValue> {
    schedule_curve(total_steps as u64, warmup_steps as u64, decay_fraction, base_lr, points)
        .map_err(|e| JsValue::from_str(&e))
}
