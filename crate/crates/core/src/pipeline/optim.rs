//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const DEFAULT_LR: f64 = 1e-4;
/// Default learning rate of the last stage of a pipeline.
pub const DEFAULT_FINAL_LR: f64 = 5e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: DEFAULT_LR, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!("betas must lie in (0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// First and second moments per parameter (canonical order) plus the
/// number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(params: &ModelParams) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    /// True for a state that has never been stepped.
    pub fn is_fresh(&self) -> bool {
        self.step == 0 && self.m.iter().chain(&self.v).all(|a| a.iter().all(|&x| x == 0.0))
    }
}

/// One AdamW update of a flat array at step `t ≥ 1`.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let n = theta.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::shape("adamw", &[n], &[grad.len(), m.len(), v.len()]));
    }
    if t == 0 {
        return Err(Error::Config("adamw step count starts at 1".into()));
    }
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
    Ok(())
}

/// Advances `state.step` and updates every parameter.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adamw", &[params.len()], &[grads.len(), state.m.len(), state.v.len()]));
    }
    state.step += 1;
    for (i, (_, t)) in params.iter_mut().enumerate() {
        adamw_update(t.data_mut(), &grads[i], &mut state.m[i], &mut state.v[i], state.step, cfg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> OptimizerConfig {
        OptimizerConfig { lr, weight_decay: wd, ..Default::default() }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut th, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&mut th, &[2.0], &mut m, &mut v, 1, &cfg(0.1, 0.0)).unwrap();
        assert!((th[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let (mut th, mut m, mut v) = ([3.0], [0.0], [0.0]);
        adamw_update(&mut th, &[0.0], &mut m, &mut v, 1, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(th[0], 3.0);
        adamw_update(&mut th, &[0.0], &mut m, &mut v, 1, &cfg(0.1, 0.5)).unwrap();
        assert!((th[0] - 3.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (mut th, mut m, mut v) = ([1.0], [0.0], [0.0]);
        assert!(adamw_update(&mut th, &[1.0, 2.0], &mut m, &mut v, 1, &cfg(0.1, 0.0)).is_err());
        assert!(adamw_update(&mut th, &[1.0], &mut m, &mut v, 0, &cfg(0.1, 0.0)).is_err());
        assert!(cfg(0.0, 0.0).validate().is_err());
        assert!(OptimizerConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(cfg(1e-3, -1.0).validate().is_err());
    }
}
