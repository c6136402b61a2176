//! AdamW with decoupled weight decay and the warmup-then-linear-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: ParamSet<T>,
    v: ParamSet<T>,
    step: u64,
    pub skipped: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            skipped: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Returns `false`, leaving everything untouched, when a gradient is not finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<bool> {
        if !params.same_layout(grads) {
            return Err(Error::config("gradient layout differs from parameters"));
        }
        if !grads.all_finite() {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let decay = T::of(1.0 - lr * c.weight_decay);
        let step_size = T::of(lr / bc1);
        let sqrt_bc2 = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for id in params.ids() {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                p[i] = p[i] * decay - step_size * m[i] / (v[i].sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(true)
    }
}

/// Linear ramp from 0 to `peak` over `warmup` iterations, then linear decay to 0 at
/// `total`.
pub fn lr_at(iter: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if iter < warmup {
        peak * iter as f64 / warmup as f64
    } else if iter >= total {
        if total > warmup { 0.0 } else { peak }
    } else {
        peak * (total - iter) as f64 / (total - warmup) as f64
    }
}
