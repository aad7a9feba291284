//! Domain value types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tolerance on total mass for a valid [`MeanField`].
pub const MASS_TOL: f64 = 1e-9;

/// A probability vector over the individual-state grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanField {
    probs: Vec<f64>,
}

impl MeanField {
    /// Validates nonnegativity and unit mass (within [`MASS_TOL`]).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(CoreError::Argument("empty mean field".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(CoreError::Contract(format!(
                "mean field entry {i} is {p}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(CoreError::Contract(format!(
                "mean field mass {total} differs from 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn dirac(n: usize, at: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[at] = 1.0;
        Self { probs }
    }

    /// Uniform over every state except `excluded`.
    pub fn uniform_except(n: usize, excluded: usize) -> Self {
        let mut probs = vec![1.0 / (n - 1) as f64; n];
        probs[excluded] = 0.0;
        Self { probs }
    }

    /// Empirical distribution of `states` over `n` cells.
    pub fn empirical(n: usize, states: &[usize]) -> Self {
        let mut probs = vec![0.0; n];
        let w = 1.0 / states.len() as f64;
        for &s in states {
            probs[s] += w;
        }
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// `Σ_s μ(s) f(s)`.
    pub fn expect(&self, values: impl Fn(usize) -> f64) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(s, p)| p * values(s))
            .sum()
    }

    /// Mean state index `μ · s`.
    pub fn mean_index(&self) -> f64 {
        self.expect(|s| s as f64)
    }

    pub fn l1(&self, other: &MeanField) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// The aggregate state `(μ_t, z_t, t)` plus constants fixed at reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateState {
    pub mean_field: MeanField,
    pub noise: f64,
    pub time: usize,
    /// Environment-specific constants (the bar location for Beach Bar).
    pub statics: Vec<f64>,
}

/// Common-noise description, serialized into [`EnvSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Finite support, uniform initial draw, constant over the episode.
    Dirac { values: Vec<f64> },
    /// `z' = ρ z + ν η` with standard-normal `η`.
    Ar1 { rho: f64, nu: f64, z0: f64 },
}

/// Finite idiosyncratic noise: offsets and their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdioNoise {
    pub support: Vec<f64>,
    pub pmf: Vec<f64>,
}

impl IdioNoise {
    /// Standard-normal pdf on `{-k, …, k}`, renormalized.
    pub fn discretized_normal(k: i64) -> Self {
        let support: Vec<f64> = (-k..=k).map(|x| x as f64).collect();
        let w: Vec<f64> = support.iter().map(|x| (-0.5 * x * x).exp()).collect();
        let total: f64 = w.iter().sum();
        Self {
            support,
            pmf: w.into_iter().map(|x| x / total).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub discount: f64,
    pub obs_dim: usize,
    pub noise: NoiseSpec,
    pub idio_noise: IdioNoise,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return Err(CoreError::Argument(format!(
                "degenerate spec: {} states, {} actions, horizon {}",
                self.num_states, self.num_actions, self.horizon
            )));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(CoreError::Argument(format!(
                "discount {} outside (0, 1]",
                self.discount
            )));
        }
        let idio = &self.idio_noise;
        if idio.support.len() != idio.pmf.len() || idio.pmf.iter().any(|p| *p < 0.0) {
            return Err(CoreError::Argument("malformed idiosyncratic noise".into()));
        }
        let total: f64 = idio.pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoreError::Argument(format!(
                "idiosyncratic pmf sums to {total}"
            )));
        }
        Ok(())
    }
}

/// How a policy network should encode individual states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateInput {
    /// Learned embedding per state index.
    Index,
    /// Dense encoding of a real feature vector of this width.
    Features(usize),
}

/// One sparse transition row: `(next state, probability)` pairs.
pub type TransitionRow = Vec<(usize, f64)>;
