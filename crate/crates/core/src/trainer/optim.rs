//! AdamW with decoupled weight decay, the warmup-cosine schedule, EMA
//! shadow updates and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moments for one tower. Elements outside `mask` are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    mask: Vec<bool>,
}

impl OptimizerState {
    pub fn new(cfg: AdamWConfig, mask: Vec<bool>) -> Self {
        let n = mask.len();
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Clears moments and the step counter, optionally with a new mask.
    pub fn reset(&mut self, mask: Option<Vec<bool>>) {
        if let Some(mask) = mask {
            self.mask = mask;
        }
        let n = self.mask.len();
        self.m = vec![0.0; n];
        self.v = vec![0.0; n];
        self.step = 0;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.mask.len() || grads.len() != self.mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer over {} parameters got params {} and grads {}",
                self.mask.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn warmup_cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// `shadow ← α·shadow + (1−α)·live`, elementwise.
pub fn ema_update(shadow: &mut [f64], live: &[f64], alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if shadow.len() != live.len() {
        return Err(Error::ShapeMismatch(format!(
            "shadow has {} parameters, live has {}",
            shadow.len(),
            live.len()
        )));
    }
    for (s, &l) in shadow.iter_mut().zip(live) {
        *s = alpha * *s + (1.0 - alpha) * l;
    }
    Ok(())
}

pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales all buffers jointly so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
