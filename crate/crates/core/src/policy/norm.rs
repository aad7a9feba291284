//! Running mean/variance standardization of observations.

use serde::{Deserialize, Serialize};

/// Standardized values are clipped to `±CLIP`.
pub const CLIP: f64 = 10.0;

const VAR_EPS: f64 = 1e-8;

/// Welford accumulator. Frozen while a forward pass runs; updated between
/// optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        if x.iter().any(|v| !v.is_finite()) {
            return;
        }
        self.count += 1.0;
        for ((m, m2), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.count;
            *m2 += d * (v - *m);
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2.0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m2| m2 / self.count).collect()
    }

    /// Identity until anything has been observed.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        if self.count == 0.0 {
            return x.to_vec();
        }
        let var = self.variance();
        x.iter()
            .zip(&self.mean)
            .zip(&var)
            .map(|((v, m), s2)| ((v - m) / (s2 + VAR_EPS).sqrt()).clamp(-CLIP, CLIP))
            .collect()
    }
}
