use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Warmup-stable-decay schedule with linear warmup and linear decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay_fraction: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(NumericsError::Contract(format!(
                "base_lr must be finite and non-negative, got {}",
                self.base_lr
            )));
        }
        if self.total_steps == 0 {
            return Err(NumericsError::Contract("total_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return Err(NumericsError::Contract(format!(
                "decay_fraction must lie in [0, 1], got {}",
                self.decay_fraction
            )));
        }
        let used = self.warmup_steps as f64 + self.decay_fraction * self.total_steps as f64;
        if used > self.total_steps as f64 {
            return Err(NumericsError::Contract(format!(
                "warmup ({}) plus decay ({}) exceeds total steps ({})",
                self.warmup_steps,
                self.decay_fraction * self.total_steps as f64,
                self.total_steps
            )));
        }
        Ok(())
    }

    pub fn decay_start(&self) -> f64 {
        (1.0 - self.decay_fraction) * self.total_steps as f64
    }
}

/// Learning rate at `step` under `sched`.
pub fn wsd_lr(step: u64, sched: &LrSchedule) -> Result<f64, NumericsError> {
    sched.validate()?;
    if step > sched.total_steps {
        return Err(NumericsError::Contract(format!(
            "step {step} beyond schedule end {}",
            sched.total_steps
        )));
    }
    let s = step as f64;
    if step < sched.warmup_steps {
        return Ok(sched.base_lr * s / sched.warmup_steps as f64);
    }
    let start = sched.decay_start();
    let total = sched.total_steps as f64;
    if s >= start && total > start {
        return Ok(sched.base_lr * (total - s) / (total - start));
    }
    Ok(sched.base_lr)
}
