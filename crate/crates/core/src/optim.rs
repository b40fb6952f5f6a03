//! AdamW with decoupled weight decay under a cosine learning-rate schedule
//! that reaches zero at `total_steps`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub total_steps: usize,
}

impl OptimConfig {
    /// lr 1e-5, betas (0.9, 0.999), decay 0.01.
    pub fn fine_tuning(total_steps: usize) -> Self {
        Self {
            lr0: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and eps > 0".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr0 * (1 + cos(pi * min(step, T) / T)) / 2`.
pub fn cosine_lr(step: usize, cfg: &OptimConfig) -> f64 {
    let total = cfg.total_steps.max(1) as f64;
    let progress = step.min(cfg.total_steps) as f64 / total;
    cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub first_moment: IndexMap<String, Tensor>,
    pub second_moment: IndexMap<String, Tensor>,
    /// Completed updates.
    pub step: usize,
}

/// One bias-corrected AdamW update at the scheduled rate for `state.step`.
/// Returns the learning rate that was applied.
///
/// Every parameter is decayed, including biases and layer-norm affine terms.
/// Parameters absent from `grads` (not reachable from the loss) are treated
/// as having a zero gradient.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimState,
    cfg: &OptimConfig,
) -> Result<f64> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }

    let lr = cosine_lr(state.step, cfg);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (name, w) in params.iter_mut() {
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(w.shape());
                &zero
            }
        };
        let m = state
            .first_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (wi, &gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *wi -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *wi);
        }
    }
    Ok(lr)
}
