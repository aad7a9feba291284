//! Small explicit games for oracle tests: a fixed sparse kernel per
//! `(s, a)`, a base reward table and an optional crowd-aversion term
//! `−crowd · μ(s)`.

use ndarray::Array2;
use rand::{Rng, RngCore};

use crate::env::{MeanFieldEnv, Scenario};
use crate::noise::CommonNoise;
use crate::types::{AggregateState, EnvSpec, IdioNoise, MeanField, NoiseSpec, TransitionRow};

#[derive(Debug, Clone)]
pub struct TabularEnv {
    spec: EnvSpec,
    noise: CommonNoise,
    /// `kernel[s][a]` is the next-state row.
    pub kernel: Vec<Vec<TransitionRow>>,
    pub rewards: Array2<f64>,
    pub crowd: f64,
    pub initial: MeanField,
}

impl TabularEnv {
    pub fn new(
        kernel: Vec<Vec<TransitionRow>>,
        rewards: Array2<f64>,
        crowd: f64,
        initial: MeanField,
        horizon: usize,
        discount: f64,
    ) -> Self {
        let (num_states, num_actions) = rewards.dim();
        let noise_spec = NoiseSpec::Dirac { values: vec![0.0] };
        Self {
            spec: EnvSpec {
                num_states,
                num_actions,
                horizon,
                discount,
                obs_dim: 1,
                noise: noise_spec.clone(),
                idio_noise: IdioNoise {
                    support: vec![0.0],
                    pmf: vec![1.0],
                },
            },
            noise: CommonNoise::new(noise_spec),
            kernel,
            rewards,
            crowd,
            initial,
        }
    }

    /// Random instance; every row has between one and `max_support` next states.
    pub fn random<R: Rng + ?Sized>(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        max_support: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = (0..num_states)
            .map(|_| {
                (0..num_actions)
                    .map(|_| {
                        let k = rng.gen_range(1..=max_support.min(num_states));
                        let mut row: TransitionRow = Vec::new();
                        let mut total = 0.0;
                        for _ in 0..k {
                            let s = rng.gen_range(0..num_states);
                            let w = rng.gen_range(0.05..1.0);
                            total += w;
                            crate::env::push_merged(&mut row, s, w);
                        }
                        row.iter_mut().for_each(|(_, p)| *p /= total);
                        row
                    })
                    .collect()
            })
            .collect();
        let rewards = Array2::from_shape_simple_fn((num_states, num_actions), || {
            rng.gen_range(-1.0..1.0)
        });
        let mut init: Vec<f64> = (0..num_states).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = init.iter().sum();
        init.iter_mut().for_each(|p| *p /= total);
        let initial = MeanField::new(init).expect("normalized");
        Self::new(kernel, rewards, 0.5, initial, horizon, 1.0)
    }

    pub fn initial_state(&self) -> AggregateState {
        AggregateState {
            mean_field: self.initial.clone(),
            noise: 0.0,
            time: 0,
            statics: Vec::new(),
        }
    }
}

impl MeanFieldEnv for TabularEnv {
    fn id(&self) -> &str {
        "tabular"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn noise(&self) -> &CommonNoise {
        &self.noise
    }

    fn action_value(&self, a: usize) -> f64 {
        a as f64
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> AggregateState {
        self.initial_state()
    }

    fn aggregates(&self, _g: &AggregateState) -> Vec<f64> {
        Vec::new()
    }

    fn deterministic_at(&self, s: usize, action: f64, _g: &AggregateState, _agg: &[f64]) -> f64 {
        // Expected next index; the kernel is the primitive here.
        self.kernel[s][action as usize]
            .iter()
            .map(|&(n, p)| n as f64 * p)
            .sum()
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
        out.extend_from_slice(&self.kernel[s][action as usize]);
    }

    fn reward_at(&self, s: usize, action: f64, g: &AggregateState, _agg: &[f64]) -> f64 {
        self.rewards[[s, action as usize]] - self.crowd * g.mean_field.probs()[s]
    }

    fn observe(&self, g: &AggregateState) -> Vec<f64> {
        vec![g.mean_field.mean_index()]
    }

    fn eval_scenarios(&self, _count: usize, _seed: u64) -> Vec<Scenario> {
        vec![Scenario {
            initial: self.initial_state(),
            noise_seed: 0,
            label: "fixed".into(),
        }]
    }
}
