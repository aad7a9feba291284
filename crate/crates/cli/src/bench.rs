//! Timing harness for one mean-field update: `warmup` untimed updates, then
//! `repeat` timed ones, averaged.

use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Result};
use mfax_core::engine::{pushforward, sample_row, step_tables, FixedPolicy, PolicyMatrix};
use mfax_core::noise::{keyed_rng, stream};
use mfax_core::types::TransitionRow;
use mfax_core::{AggregateState, MeanField, MeanFieldEnv, Scenario};
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    /// Exact update: transition supports, rewards and `μ' = Aᵀμ`.
    Pushforward,
    /// Sampled update: every agent draws an action and a next state.
    Sample,
}

impl FromStr for BenchOp {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pushforward" => Ok(BenchOp::Pushforward),
            "sample" => Ok(BenchOp::Sample),
            other => bail!("unknown bench op {other:?}; expected pushforward or sample"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub env: String,
    pub op: BenchOp,
    pub warmup: usize,
    pub repeat: usize,
    pub agents: usize,
    pub threads: usize,
    /// Mean seconds per timed update.
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub timings_s: Vec<f64>,
}

/// Walks the uniform policy through consecutive updates, restarting the
/// episode at the horizon.
struct Walker<'a> {
    env: &'a dyn MeanFieldEnv,
    scenario: Scenario,
    pi: PolicyMatrix,
    g: AggregateState,
    agents: Vec<usize>,
    row: TransitionRow,
    calls: u64,
}

impl<'a> Walker<'a> {
    fn new(env: &'a dyn MeanFieldEnv, agents: usize) -> Self {
        let spec = env.spec();
        let scenario = env.scenario(0, 0);
        let mut rng = keyed_rng(0, stream::AGENTS, u64::MAX);
        let mu0: TransitionRow = scenario.initial.mean_field.probs().iter().copied().enumerate().collect();
        let agents = (0..agents).map(|_| sample_row(&mut rng, &mu0)).collect();
        Self {
            env,
            g: scenario.initial.clone(),
            scenario,
            pi: FixedPolicy::uniform(spec.num_states, spec.num_actions).0,
            agents,
            row: TransitionRow::new(),
            calls: 0,
        }
    }

    fn advance(&mut self, mu: MeanField) {
        let t = self.g.time;
        self.g = if t + 1 >= self.env.spec().horizon {
            self.scenario.initial.clone()
        } else {
            AggregateState {
                mean_field: mu,
                noise: self.env.noise().step_keyed(self.g.noise, self.scenario.noise_seed, t),
                time: t + 1,
                statics: self.g.statics.clone(),
            }
        };
    }

    fn update(&mut self, op: BenchOp) -> Result<()> {
        match op {
            BenchOp::Pushforward => {
                let tables = step_tables(self.env, &self.g)?;
                let mu = pushforward(self.g.mean_field.probs(), &self.pi, &tables.transitions)?;
                self.advance(MeanField::new(mu)?);
            }
            BenchOp::Sample => {
                let env = self.env;
                let agg = env.aggregates(&self.g);
                let na = env.spec().num_actions;
                let mut rng = keyed_rng(self.calls, stream::AGENTS, 0);
                self.calls += 1;
                for s in self.agents.iter_mut() {
                    let a = rng.gen_range(0..na);
                    let action = env.action_value(a);
                    env.transition_at(*s, action, &self.g, &agg, &mut self.row);
                    std::hint::black_box(env.reward_at(*s, action, &self.g, &agg));
                    *s = sample_row(&mut rng, &self.row);
                    self.row.clear();
                }
                let mu = MeanField::empirical(env.spec().num_states, &self.agents);
                self.advance(mu);
            }
        }
        Ok(())
    }
}

pub fn run_bench(env: &dyn MeanFieldEnv, op: BenchOp, repeat: usize, warmup: usize, agents: usize) -> Result<BenchReport> {
    if repeat == 0 {
        bail!("repeat must be positive");
    }
    if op == BenchOp::Sample && agents == 0 {
        bail!("sample op needs at least one agent");
    }
    let mut walker = Walker::new(env, if op == BenchOp::Sample { agents } else { 0 });
    for _ in 0..warmup {
        walker.update(op)?;
    }
    let mut timings_s = Vec::with_capacity(repeat);
    for _ in 0..repeat {
        let start = Instant::now();
        walker.update(op)?;
        timings_s.push(start.elapsed().as_secs_f64());
    }
    let mean_s = timings_s.iter().sum::<f64>() / repeat as f64;
    Ok(BenchReport {
        env: env.id().to_string(),
        op,
        warmup,
        repeat,
        agents: if op == BenchOp::Sample { agents } else { 0 },
        threads: rayon::current_num_threads(),
        mean_s,
        min_s: timings_s.iter().copied().fold(f64::INFINITY, f64::min),
        max_s: timings_s.iter().copied().fold(0.0, f64::max),
        timings_s,
    })
}
