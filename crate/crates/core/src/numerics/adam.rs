use serde::{Deserialize, Serialize};

use super::{NumericsError, Real, Tensor};

/// Adam hyperparameters. No weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(NumericsError::Contract(format!(
                "adam requires 0 <= beta1, beta2 < 1 and eps > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Bias-corrected Adam step, applied in place.
pub fn adam_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), NumericsError> {
    param.ensure_same_shape(grad)?;
    param.ensure_same_shape(&state.m)?;
    param.ensure_same_shape(&state.v)?;
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(NumericsError::Contract(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    cfg.validate()?;

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);

    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in p.iter_mut().zip(grad.data()).zip(m).zip(v) {
        let g = g.wide();
        let mn = b1 * m.wide() + (1.0 - b1) * g;
        let vn = b2 * v.wide() + (1.0 - b2) * g * g;
        *m = T::lit(mn);
        *v = T::lit(vn);
        let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + cfg.eps);
        *p = T::lit(p.wide() - update);
    }
    Ok(())
}

/// Functional form of [`adam_step`].
pub fn adam_update<T: Real>(
    param: &Tensor<T>,
    grad: &Tensor<T>,
    state: &AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(Tensor<T>, AdamState<T>), NumericsError> {
    let mut param = param.clone();
    let mut state = state.clone();
    adam_step(&mut param, grad, &mut state, lr, cfg)?;
    Ok((param, state))
}
