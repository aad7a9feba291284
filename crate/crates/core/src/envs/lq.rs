//! Linear-quadratic crowding game with a piecewise common drift.
//!
//! `s' = clip(round(s + a + σ(ξ_t ρ + ε √(1−ρ²))), 0, |S|−1)` with
//! `ξ_t = −10z` before step 8, `0` through step 20 and `10z` after.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::env::{push_merged, MeanFieldEnv, Scenario};
use crate::noise::CommonNoise;
use crate::types::{AggregateState, EnvSpec, IdioNoise, MeanField, NoiseSpec, TransitionRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqParams {
    pub sigma: f64,
    pub rho: f64,
    pub c_a: f64,
    pub c_term: f64,
    pub q: f64,
    pub kappa: f64,
    pub horizon: usize,
    pub num_states: usize,
    /// Actions are `{−max_action, …, max_action}`.
    pub max_action: i64,
    /// Idiosyncratic noise grid is `{−k, …, k}`.
    pub eps_half_width: i64,
    pub discount: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            rho: 0.5,
            c_a: 0.5,
            c_term: 1.0,
            q: 0.1,
            kappa: 0.5,
            horizon: 30,
            num_states: 100,
            max_action: 3,
            eps_half_width: 3,
            discount: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearQuadratic {
    params: LqParams,
    spec: EnvSpec,
    noise: CommonNoise,
}

impl LinearQuadratic {
    pub fn new(params: LqParams) -> Self {
        let noise_spec = NoiseSpec::Dirac {
            values: vec![-1.0, 1.0],
        };
        let spec = EnvSpec {
            num_states: params.num_states,
            num_actions: (2 * params.max_action + 1) as usize,
            horizon: params.horizon,
            discount: params.discount,
            obs_dim: 1,
            noise: noise_spec.clone(),
            idio_noise: IdioNoise::discretized_normal(params.eps_half_width),
        };
        Self {
            params,
            spec,
            noise: CommonNoise::new(noise_spec),
        }
    }

    pub fn params(&self) -> &LqParams {
        &self.params
    }

    /// The common drift `ξ_t`.
    pub fn xi(t: usize, z: f64) -> f64 {
        if t < 8 {
            -10.0 * z
        } else if t <= 20 {
            0.0
        } else {
            10.0 * z
        }
    }

    fn clip(&self, x: f64) -> usize {
        x.round().clamp(0.0, (self.params.num_states - 1) as f64) as usize
    }

    fn initial(&self, z: f64) -> AggregateState {
        AggregateState {
            mean_field: MeanField::uniform(self.params.num_states),
            noise: z,
            time: 0,
            statics: Vec::new(),
        }
    }
}

impl Default for LinearQuadratic {
    fn default() -> Self {
        Self::new(LqParams::default())
    }
}

impl MeanFieldEnv for LinearQuadratic {
    fn id(&self) -> &str {
        "lq"
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
        let z = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        self.initial(z)
    }

    fn aggregates(&self, g: &AggregateState) -> Vec<f64> {
        vec![g.mean_field.mean_index()]
    }

    fn deterministic_at(&self, s: usize, action: f64, g: &AggregateState, _agg: &[f64]) -> f64 {
        let p = &self.params;
        s as f64 + action + p.sigma * Self::xi(g.time, g.noise) * p.rho
    }

    fn transition_at(
        &self,
        s: usize,
        action: f64,
        g: &AggregateState,
        agg: &[f64],
        out: &mut TransitionRow,
    ) {
        out.clear();
        let p = &self.params;
        let base = self.deterministic_at(s, action, g, agg);
        let scale = p.sigma * (1.0 - p.rho * p.rho).sqrt();
        let idio = &self.spec.idio_noise;
        for (eps, w) in idio.support.iter().zip(&idio.pmf) {
            push_merged(out, self.clip(base + scale * eps), *w);
        }
    }

    fn reward_at(&self, s: usize, action: f64, _g: &AggregateState, agg: &[f64]) -> f64 {
        let p = &self.params;
        let d = agg[0] - s as f64;
        -p.c_a * action * action + p.q * action * d - 0.5 * p.kappa * d * d
    }

    fn terminal_reward(&self, s: usize, _g: &AggregateState, agg: &[f64]) -> Option<f64> {
        let d = agg[0] - s as f64;
        Some(-0.5 * self.params.c_term * d * d)
    }

    fn observe(&self, g: &AggregateState) -> Vec<f64> {
        vec![g.mean_field.mean_index()]
    }

    fn eval_scenarios(&self, _count: usize, _seed: u64) -> Vec<Scenario> {
        [-1.0, 1.0]
            .into_iter()
            .map(|z| Scenario {
                initial: self.initial(z),
                noise_seed: 0,
                label: format!("z={z}"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(t: usize, z: f64) -> AggregateState {
        AggregateState {
            mean_field: MeanField::uniform(100),
            noise: z,
            time: t,
            statics: vec![],
        }
    }

    #[test]
    fn deterministic_step_examples() {
        let env = LinearQuadratic::default();
        // action index 6 is +3, index 3 is 0
        assert_eq!(env.deterministic_step(50, 6, &state(10, 1.0)).unwrap(), 53.0);
        assert_eq!(env.deterministic_step(50, 3, &state(10, 1.0)).unwrap(), 50.0);
        assert!(env.deterministic_step(100, 3, &state(10, 1.0)).is_err());
        assert!(env.deterministic_step(0, 7, &state(10, 1.0)).is_err());
    }

    #[test]
    fn support_in_the_quiet_window() {
        let env = LinearQuadratic::default();
        let row = env.transition_support(50, 3, &state(10, 1.0)).unwrap();
        let states: Vec<usize> = row.iter().map(|(s, _)| *s).collect();
        assert_eq!(states, (47..=53).collect::<Vec<_>>());
        let w = IdioNoise::discretized_normal(3).pmf;
        for ((_, p), q) in row.iter().zip(&w) {
            assert_eq!(p, q);
        }
    }

    #[test]
    fn lower_boundary_clips() {
        let env = LinearQuadratic::default();
        let row = env.transition_support(0, 0, &state(10, 1.0)).unwrap();
        assert!(row.iter().all(|(s, _)| *s <= 2));
        let total: f64 = row.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn late_drift_moves_mode() {
        let env = LinearQuadratic::default();
        let row = env.transition_support(50, 3, &state(25, 1.0)).unwrap();
        let mode = row
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(mode, 55);
    }

    #[test]
    fn reward_examples() {
        let env = LinearQuadratic::default();
        let mut mu = vec![0.0; 100];
        mu[40] = 1.0;
        let g = AggregateState {
            mean_field: MeanField::new(mu).unwrap(),
            noise: 1.0,
            time: 3,
            statics: vec![],
        };
        assert_eq!(env.reward(40, 3, &g).unwrap(), 0.0);
        // a = +2 at the mean: −c_a · 4
        assert_eq!(env.reward(40, 5, &g).unwrap(), -2.0);
    }

    #[test]
    fn observation_examples() {
        let env = LinearQuadratic::default();
        assert_eq!(env.observe(&state(0, 1.0)), vec![49.5]);
        let mut g = state(0, 1.0);
        g.mean_field = MeanField::dirac(100, 7);
        assert_eq!(env.observe(&g), vec![7.0]);
        let mut mu = vec![0.0; 100];
        mu[0] = 0.5;
        mu[99] = 0.5;
        g.mean_field = MeanField::new(mu).unwrap();
        assert_eq!(env.observe(&g), vec![49.5]);
    }
}
