//! Adam with global-norm clipping and a linear learning-rate anneal.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::{global_norm, ParamStore};
use crate::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled to at most this global norm; `None` disables.
    pub max_grad_norm: Option<f64>,
    /// The learning rate reaches `lr * final_lr_fraction` at the last iteration.
    pub final_lr_fraction: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
            final_lr_fraction: 0.1,
        }
    }
}

impl AdamConfig {
    /// Learning rate at `iteration` of `total`, linear from `lr` to
    /// `lr * final_lr_fraction`.
    pub fn lr_at(&self, iteration: usize, total: usize) -> f64 {
        let frac = if total == 0 {
            1.0
        } else {
            (iteration as f64 / total as f64).clamp(0.0, 1.0)
        };
        (1.0 - frac) * self.lr + frac * (self.lr * self.final_lr_fraction)
    }
}

/// What one call to [`Adam::step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    pub applied: bool,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates rejected because of non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// One descent step on `grads`. Non-finite gradients skip the update.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Tensor],
        iteration: usize,
        total_iterations: usize,
    ) -> StepInfo {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let lr = self.config.lr_at(iteration, total_iterations);
        let grad_norm = global_norm(grads);
        if !grad_norm.is_finite() {
            self.skipped += 1;
            log::warn!(
                "skipping update at iteration {iteration}: non-finite gradient ({} skipped so far)",
                self.skipped
            );
            return StepInfo {
                grad_norm,
                lr,
                applied: false,
            };
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k];
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        StepInfo {
            grad_norm,
            lr,
            applied: true,
        }
    }
}

/// Rescales `grads` in place to global norm at most `max`; returns the
/// original norm.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max && norm.is_finite() {
        let c = max / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }
    norm
}

pub fn zeros_like(grads: &[Tensor]) -> Vec<Tensor> {
    grads.iter().map(|g| Array2::zeros(g.dim())).collect()
}
