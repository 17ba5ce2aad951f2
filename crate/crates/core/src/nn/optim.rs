//! Adam with a linear warmup/decay schedule and global-norm clipping.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Linear warmup from 0 to `peak`, then linear decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak: lr,
            warmup_steps: 0,
            total_steps: u64::MAX,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == u64::MAX {
            return self.peak;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return if step <= self.warmup_steps { self.peak } else { 0.0 };
        }
        let left = self.total_steps.saturating_sub(step) as f64;
        self.peak * (left / span as f64).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[(usize, usize)], config: AdamConfig) -> Self {
        AdamState {
            config,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }
}

pub fn global_norm<T: Scalar>(grads: &[Array2<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Array2<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

pub fn adam_step<T: Scalar>(params: &mut [Array2<T>], grads: &[Array2<T>], state: &mut AdamState<T>, lr: f64) {
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - beta2.powi(state.t.min(i32::MAX as u64) as i32);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + ob1 * g;
            *v = b2 * *v + ob2 * g * g;
            *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
        });
    }
}
