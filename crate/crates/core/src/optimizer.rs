//! Adam with per-group learning rates and the log-linear position schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for a flat vector of scalar parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub params: AdamParams,
    /// Scalar updates skipped because their gradient was not finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_params(len, AdamParams::default())
    }

    pub fn with_params(len: usize, params: AdamParams) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            params,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// Extends the moments with zeros for newly appended parameters.
    pub fn grow(&mut self, len: usize) {
        if len > self.len() {
            self.first_moment.resize(len, 0.0);
            self.second_moment.resize(len, 0.0);
        }
    }
}

/// One bias-corrected Adam update.
///
/// Non-finite gradient entries leave their parameter and moments untouched
/// and are counted in `state.skipped`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    state.step_count += 1;
    let AdamParams { beta1, beta2, eps } = state.params;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            state.skipped += 1;
            continue;
        }
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub lr_delay_mult: f64,
    pub lr_delay_steps: u64,
    pub max_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_init: 0.0008,
            lr_final: 0.0000016,
            lr_delay_mult: 0.01,
            lr_delay_steps: 0,
            max_steps: 30000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init) || self.max_steps == 0 {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

/// Log-linear interpolation from `lr_init` to `lr_final`, clamped after
/// `max_steps`. During the first `lr_delay_steps` steps the rate is further
/// scaled by a factor easing from `lr_delay_mult` to 1.
pub fn scheduled_lr(sched: &LrSchedule, step: u64) -> f64 {
    if sched.lr_init == 0.0 && sched.lr_final == 0.0 {
        return 0.0;
    }
    let delay = if sched.lr_delay_steps > 0 {
        let p = (step as f64 / sched.lr_delay_steps as f64).min(1.0);
        sched.lr_delay_mult + (1.0 - sched.lr_delay_mult) * (0.5 * std::f64::consts::PI * p).sin()
    } else {
        1.0
    };
    if step >= sched.max_steps {
        return delay * sched.lr_final;
    }
    let t = step as f64 / sched.max_steps as f64;
    let log_lr = sched.lr_init.ln() * (1.0 - t) + sched.lr_final.ln() * t;
    delay * log_lr.exp()
}

/// Learning rates of the map, pose and feature parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: LrSchedule,
    pub color: f64,
    pub opacity: f64,
    pub scaling: f64,
    pub rotation: f64,
    pub pose_rotation: f64,
    pub pose_translation: f64,
    pub feature: f64,
    pub head: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: LrSchedule::default(),
            color: 0.0025,
            opacity: 0.05,
            scaling: 0.005,
            rotation: 0.001,
            pose_rotation: 0.003,
            pose_translation: 0.001,
            feature: 0.01,
            head: 0.01,
        }
    }
}
