use std::f64::consts::PI;

use super::param::{Param, Params};
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// Updates `param` in place and clears its gradient. A non-finite
    /// gradient aborts before any state changes.
    pub fn step(&self, name: &str, param: &mut Param, lr: f64) -> Result<()> {
        if param.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        param.step += 1;
        let t = param.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        ndarray::Zip::from(&mut param.value).and(&mut param.m).and(&mut param.v).and(&param.grad).for_each(
            |w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            },
        );
        param.zero_grad();
        Ok(())
    }

    /// Steps every parameter of `model`. Stops at the first non-finite
    /// gradient.
    pub fn step_all<P: Params + ?Sized>(&self, model: &mut P, lr: f64) -> Result<()> {
        let mut outcome = Ok(());
        model.visit_mut("", &mut |name, p| {
            if outcome.is_ok() {
                outcome = self.step(name, p, lr);
            }
        });
        outcome
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<P: Params + ?Sized>(model: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit("", &mut |_, p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        model.scale_grads(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial_lr: 1e-4, total_epochs: 100, min_lr: 0.0 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min_lr && self.min_lr <= self.initial_lr) || self.total_epochs < 1 {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }
}

/// Cosine annealing from `initial_lr` at epoch 0 to `min_lr` at
/// `total_epochs`.
pub fn cosine_lr(schedule: &LrSchedule, epoch: usize) -> Result<f64> {
    if epoch > schedule.total_epochs {
        return Err(Error::EpochOutOfRange { epoch, total: schedule.total_epochs });
    }
    let ratio = epoch as f64 / schedule.total_epochs as f64;
    Ok(schedule.min_lr + 0.5 * (schedule.initial_lr - schedule.min_lr) * (1.0 + (PI * ratio).cos()))
}
