//! One-dimensional beach bar that may close halfway through the episode.
//!
//! `z = 1` keeps the bar open after `T/2`, `z = 0` closes it. Agents see the
//! mean position, the open flag `ξ_t` and the bar location, but not `t`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{push_merged, MeanFieldEnv, Scenario};
use crate::noise::{keyed_rng, stream, CommonNoise};
use crate::types::{AggregateState, EnvSpec, IdioNoise, MeanField, NoiseSpec, TransitionRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeachBarParams {
    pub horizon: usize,
    pub num_states: usize,
    /// Actions are `{−max_action, …, max_action}`.
    pub max_action: i64,
    pub idio_support: Vec<i64>,
    pub idio_pmf: Vec<f64>,
    pub discount: f64,
}

impl Default for BeachBarParams {
    fn default() -> Self {
        Self {
            horizon: 30,
            num_states: 100,
            max_action: 5,
            idio_support: vec![-2, -1, 0, 1, 2],
            idio_pmf: vec![0.05, 0.1, 0.7, 0.1, 0.05],
            discount: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeachBar {
    params: BeachBarParams,
    spec: EnvSpec,
    noise: CommonNoise,
}

impl BeachBar {
    pub fn new(params: BeachBarParams) -> Self {
        let noise_spec = NoiseSpec::Dirac {
            values: vec![0.0, 1.0],
        };
        let spec = EnvSpec {
            num_states: params.num_states,
            num_actions: (2 * params.max_action + 1) as usize,
            horizon: params.horizon,
            discount: params.discount,
            obs_dim: 3,
            noise: noise_spec.clone(),
            idio_noise: IdioNoise {
                support: params.idio_support.iter().map(|&e| e as f64).collect(),
                pmf: params.idio_pmf.clone(),
            },
        };
        Self {
            params,
            spec,
            noise: CommonNoise::new(noise_spec),
        }
    }

    pub fn params(&self) -> &BeachBarParams {
        &self.params
    }

    /// `1` while the bar is certainly open, `z` from `T/2` on.
    pub fn xi(&self, t: usize, z: f64) -> f64 {
        if 2 * t < self.params.horizon {
            1.0
        } else {
            z
        }
    }

    /// Clamp to the grid; no interior state is illegal.
    pub fn legal(&self, raw: i64) -> usize {
        raw.clamp(0, self.params.num_states as i64 - 1) as usize
    }

    pub fn bar(g: &AggregateState) -> usize {
        g.statics[0] as usize
    }

    pub fn initial(&self, bar: usize, z: f64) -> AggregateState {
        AggregateState {
            mean_field: MeanField::uniform_except(self.params.num_states, bar),
            noise: z,
            time: 0,
            statics: vec![bar as f64],
        }
    }
}

impl Default for BeachBar {
    fn default() -> Self {
        Self::new(BeachBarParams::default())
    }
}

impl MeanFieldEnv for BeachBar {
    fn id(&self) -> &str {
        "beach_bar"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn noise(&self) -> &CommonNoise {
        &self.noise
    }

    fn action_value(&self, a: usize) -> f64 {
        a as f64 - self.params.max_action as f64
    }

    fn reset(&self, rng: &mut dyn RngCore) -> AggregateState {
        let bar = rng.gen_range(0..self.params.num_states);
        let z = if rng.gen::<bool>() { 1.0 } else { 0.0 };
        self.initial(bar, z)
    }

    fn aggregates(&self, g: &AggregateState) -> Vec<f64> {
        vec![g.mean_field.mean_index()]
    }

    fn deterministic_at(&self, s: usize, action: f64, _g: &AggregateState, _agg: &[f64]) -> f64 {
        s as f64 + action
    }

    fn transition_at(
        &self,
        s: usize,
        action: f64,
        _g: &AggregateState,
        _agg: &[f64],
        out: &mut TransitionRow,
    ) {
        out.clear();
        let base = s as i64 + action.round() as i64;
        for (eps, w) in self.params.idio_support.iter().zip(&self.params.idio_pmf) {
            push_merged(out, self.legal(base + eps), *w);
        }
    }

    fn reward_at(&self, s: usize, action: f64, g: &AggregateState, _agg: &[f64]) -> f64 {
        let n = self.params.num_states as f64;
        let t = g.time;
        let z = g.noise;
        let xi = self.xi(t, z);
        let dist = (Self::bar(g) as f64 - s as f64).abs();
        let near_closure = 2 * (t + 1) >= self.params.horizon;
        let adjacent = dist == 1.0;
        let log_mu = g.mean_field.probs()[s].ln().clamp(-n, 0.0);
        let mut r = -dist * xi;
        if near_closure && adjacent {
            r -= n * (1.0 - z);
        }
        r -= xi * log_mu;
        r -= 0.1 * n * (1.0 - xi) * log_mu;
        r - action.abs() / n
    }

    fn observe(&self, g: &AggregateState) -> Vec<f64> {
        vec![
            g.mean_field.mean_index(),
            self.xi(g.time, g.noise),
            g.statics[0],
        ]
    }

    /// `count` bar locations drawn from `seed`, each with both noise values.
    fn eval_scenarios(&self, count: usize, seed: u64) -> Vec<Scenario> {
        let mut rng = keyed_rng(seed, stream::RESET, u64::MAX);
        let mut out = Vec::with_capacity(2 * count);
        for _ in 0..count {
            let bar = rng.gen_range(0..self.params.num_states);
            for z in [0.0, 1.0] {
                out.push(Scenario {
                    initial: self.initial(bar, z),
                    noise_seed: 0,
                    label: format!("l={bar},z={z}"),
                });
            }
        }
        out
    }
}
