//! The training loop: BatchTopK forward/backward, Adam on every tensor under a
//! warmup-stable-decay schedule, then the threshold EMA.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_stream, ActivationShard, DataError};
use crate::model::{
    init_params, loss_and_grads, update_threshold, write_checkpoint, Checkpoint, CheckpointMeta,
    ModelError, Normalization, OptimizerState, ParamName, SmixaeConfig, SmixaeParams,
};
use crate::numerics::{adam_step, derive_seed, wsd_lr, AdamConfig, AdamState, LrSchedule, NumericsError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss at step {step}; last good checkpoint kept")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_adam() -> AdamConfig {
    AdamConfig::default()
}

fn default_window() -> usize {
    100
}

/// A training run, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub model: SmixaeConfig,
    pub total_tokens: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub decay_fraction: f64,
    #[serde(default = "default_adam")]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
    pub log_every: u64,
    #[serde(default)]
    pub normalize_input: bool,
    /// Trailing window (in steps) for the fired-experts monitor.
    #[serde(default = "default_window")]
    pub frac_alive_window: usize,
}

impl TrainRunConfig {
    /// Full-scale recipe: 500M tokens, batch 8192, lr 5e-4 with 500 warmup
    /// steps and a 20% linear decay.
    pub fn full_scale(n: usize) -> Self {
        Self {
            model: SmixaeConfig::full_scale(n),
            total_tokens: 500_000_000,
            batch_size: 8192,
            lr: 5e-4,
            warmup_steps: 500,
            decay_fraction: 0.2,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 5000,
            log_every: 100,
            normalize_input: false,
            frac_alive_window: 100,
        }
    }

    pub fn steps(&self) -> u64 {
        self.total_tokens / self.batch_size as u64
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps(),
            decay_fraction: self.decay_fraction,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.total_tokens < self.batch_size as u64 {
            return bad(format!(
                "total_tokens ({}) must be at least batch_size ({})",
                self.total_tokens, self.batch_size
            ));
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.frac_alive_window == 0 {
            return bad("frac_alive_window must be positive".into());
        }
        self.adam.validate()?;
        self.schedule().validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub lr: f64,
    pub mse: f64,
    pub aux: f64,
    pub total: f64,
    pub frac_experts_fired_window: f64,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SmixaeParams<f32>,
    pub optimizer: OptimizerState,
    pub normalization: Option<Normalization>,
    pub log: Vec<TrainLogRecord>,
    /// Per-expert "fired at least once" over the last `frac_alive_window` steps.
    pub final_frac_alive: f64,
}

/// Fraction of experts admitted at least once in the trailing `window`
/// entries of `fired` (one `[j]` vector per step). A window of 0 counts as 1.
pub fn frac_alive_window(fired: &[Vec<bool>], window: usize) -> f64 {
    let Some(j) = fired.first().map(Vec::len) else {
        return 0.0;
    };
    if j == 0 {
        return 0.0;
    }
    let start = fired.len().saturating_sub(window.max(1));
    let alive = (0..j)
        .filter(|&i| fired[start..].iter().any(|f| f[i]))
        .count();
    alive as f64 / j as f64
}

/// Mean subtraction and a global scale making the mean squared norm 1.
pub fn fit_normalization(shards: &[ActivationShard]) -> Result<Normalization, TrainError> {
    let n = shards.first().map(|s| s.n()).unwrap_or(0);
    let count: usize = shards.iter().map(|s| s.count()).sum();
    if count == 0 {
        return Err(TrainError::Config("cannot normalize an empty dataset".into()));
    }
    let mut mean = vec![0.0f64; n];
    for s in shards {
        for r in 0..s.count() {
            for (m, &v) in mean.iter_mut().zip(s.row(r)) {
                *m += v as f64;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut sq = 0.0f64;
    for s in shards {
        for r in 0..s.count() {
            sq += s.row(r).iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>();
        }
    }
    let ms = sq / count as f64;
    let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
    Ok(Normalization {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        scale: scale as f32,
    })
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.smxc";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}.smxc")
}

/// Runs `run` over `shards`. When `out_dir` is given, writes the effective
/// config, a JSON-lines log, periodic checkpoints and `final.smxc` there.
pub fn train(
    run: &TrainRunConfig,
    shards: &[ActivationShard],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    run.validate()?;
    let cfg = &run.model;
    if let Some(s) = shards.iter().find(|s| s.n() != cfg.n) {
        return Err(TrainError::Config(format!(
            "data dimension {} does not match model n = {}",
            s.n(),
            cfg.n
        )));
    }
    let normalization = if run.normalize_input {
        Some(fit_normalization(shards)?)
    } else {
        None
    };

    let steps = run.steps();
    let sched = run.schedule();
    let mut stream = batch_stream(shards, run.batch_size, derive_seed(run.seed, 1), usize::MAX)?;
    let mut params = init_params::<f32>(cfg, derive_seed(run.seed, 0))?;
    let mut states: Vec<AdamState<f32>> = ParamName::ALL
        .iter()
        .map(|n| AdamState::new(&n.shape(cfg)))
        .collect();

    let meta = CheckpointMeta {
        model: cfg.clone(),
        normalization: normalization.clone(),
        training: Some(serde_json::to_value(run)?),
    };
    let mut log_writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(run)? + "\n")?;
            Some(BufWriter::new(fs::File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let save = |dir: &Path, name: &str, params: &SmixaeParams<f32>, states: &[AdamState<f32>], step: u64| {
        let ck = Checkpoint {
            meta: meta.clone(),
            params: params.clone(),
            optimizer: Some(OptimizerState {
                step,
                states: states.to_vec(),
            }),
        };
        write_checkpoint(&dir.join(name), &ck)
    };

    let mut log = Vec::new();
    let mut fired: VecDeque<Vec<bool>> = VecDeque::with_capacity(run.frac_alive_window + 1);
    for step in 0..steps {
        let mut batch = stream.next().expect("stream is unbounded");
        if let Some(norm) = &normalization {
            norm.apply(&mut batch);
        }
        let out = match loss_and_grads(&params, &batch, cfg) {
            Ok(o) if o.loss.total.is_finite() => o,
            Ok(_) | Err(ModelError::NonFinite { .. }) | Err(ModelError::NonFiniteExpert { .. }) => {
                return Err(TrainError::NonFiniteLoss { step: step + 1 })
            }
            Err(e) => return Err(e.into()),
        };
        let lr = wsd_lr(step, &sched)?;
        for (name, state) in ParamName::ALL.into_iter().zip(states.iter_mut()) {
            adam_step(params.tensors.get_mut(name), out.grads.get(name), state, lr, &run.adam)?;
        }
        params.t = update_threshold(params.t, &out.latents, cfg.threshold_lr)?;

        let j = cfg.j;
        let mut step_fired = vec![false; j];
        for (idx, &m) in out.latents.mask.iter().enumerate() {
            step_fired[idx % j] |= m;
        }
        if fired.len() == run.frac_alive_window {
            fired.pop_front();
        }
        fired.push_back(step_fired);

        let done = step + 1;
        if done % run.log_every == 0 || done == steps {
            let rec = TrainLogRecord {
                step: done,
                lr,
                mse: out.loss.mse,
                aux: out.loss.aux,
                total: out.loss.total,
                frac_experts_fired_window: frac_alive_window(fired.make_contiguous(), run.frac_alive_window),
                t: params.t,
            };
            if let Some(w) = log_writer.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            log.push(rec);
        }
        if let Some(dir) = out_dir {
            if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done != steps {
                save(dir, &checkpoint_name(done), &params, &states, done)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save(dir, FINAL_CHECKPOINT, &params, &states, steps)?;
    }

    Ok(TrainOutcome {
        final_frac_alive: frac_alive_window(fired.make_contiguous(), run.frac_alive_window),
        optimizer: OptimizerState { step: steps, states },
        params,
        normalization,
        log,
    })
}

/// A small run config suitable for quick experiments and tests.
pub fn tiny_run(model: SmixaeConfig, steps: u64, batch_size: usize) -> TrainRunConfig {
    TrainRunConfig {
        model,
        total_tokens: steps * batch_size as u64,
        batch_size,
        lr: 1e-3,
        warmup_steps: (steps / 20).min(500),
        decay_fraction: 0.2,
        adam: AdamConfig::default(),
        seed: 0,
        checkpoint_every: 0,
        log_every: (steps / 20).max(1),
        normalize_input: false,
        frac_alive_window: 100,
    }
}
