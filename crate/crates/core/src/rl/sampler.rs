//! Sample-based rollouts for the baselines: a finite population estimates
//! the mean-field sequence, then a handful of learning agents act against
//! that frozen sequence.

use std::sync::Arc;

use mfax_autodiff::dist::{beta_log_density_f64, sample_beta, sample_categorical};
use mfax_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{sample_row, StepCache};
use crate::env::{MeanFieldEnv, Scenario};
use crate::error::{numeric, CoreError, Result};
use crate::noise::{keyed_rng, stream};
use crate::policy::{HeadKind, PolicyNet};
use crate::types::{AggregateState, MeanField, TransitionRow};

/// Per-row action distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionDist {
    /// Row-wise log-probabilities over discrete actions.
    Discrete(Tensor),
    /// Beta parameters per row over `[0, 1]`.
    Beta { alpha: Vec<f64>, beta: Vec<f64> },
}

/// A sampled action: the index for discrete actions, the unit draw for Beta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub action: f64,
    pub log_prob: f64,
}

impl ActionDist {
    pub fn sample<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> Draw {
        match self {
            ActionDist::Discrete(lp) => {
                let probs: Vec<f64> = lp.row(row).iter().map(|x| x.exp()).collect();
                let a = sample_categorical(rng, &probs);
                Draw {
                    action: a as f64,
                    log_prob: lp[[row, a]],
                }
            }
            ActionDist::Beta { alpha, beta } => {
                let x = sample_beta(rng, alpha[row], beta[row]);
                Draw {
                    action: x,
                    log_prob: beta_log_density_f64(x, alpha[row], beta[row]),
                }
            }
        }
    }
}

/// One decision step for a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ActStep {
    pub dist: ActionDist,
    pub values: Option<Vec<f64>>,
}

/// A policy queried row-wise by sampled agents.
pub trait Behavior: Sync {
    fn initial_hidden(&self) -> Vec<f64>;

    /// Distributions for `states` (every state when `None`) and `h'`.
    fn act(&self, states: Option<Arc<[usize]>>, obs: &[f64], hidden: &[f64], done: bool) -> Result<(ActStep, Vec<f64>)>;
}

/// The policy network acting directly, with Beta heads sampled
/// continuously when `continuous` is set.
pub struct NetActor<'a> {
    pub net: &'a PolicyNet,
    pub continuous: bool,
}

impl<'a> NetActor<'a> {
    pub fn new(net: &'a PolicyNet, env: &dyn MeanFieldEnv) -> Self {
        Self {
            net,
            continuous: continuous_actions(net, env),
        }
    }
}

impl Behavior for NetActor<'_> {
    fn initial_hidden(&self) -> Vec<f64> {
        self.net.zero_hidden()
    }

    fn act(&self, states: Option<Arc<[usize]>>, obs: &[f64], hidden: &[f64], done: bool) -> Result<(ActStep, Vec<f64>)> {
        let (rows, h) = self.net.evaluate_rows(states, obs, hidden, done)?;
        let dist = match (self.continuous, rows.beta) {
            (true, Some((alpha, beta))) => ActionDist::Beta { alpha, beta },
            _ => ActionDist::Discrete(rows.log_probs),
        };
        Ok((
            ActStep {
                dist,
                values: rows.value,
            },
            h,
        ))
    }
}

/// Whether agents sample continuous actions: a [`HeadKind::Beta`] head on an
/// environment with an interval action set. Ordinal heads act on the grid.
pub fn continuous_actions(net: &PolicyNet, env: &dyn MeanFieldEnv) -> bool {
    net.config.head == HeadKind::Beta && env.continuous_action(0.5).is_some()
}

/// Next-state row and reward of one agent's draw.
fn realize(
    env: &dyn MeanFieldEnv,
    cache: &mut StepCache<'_>,
    dist: &ActionDist,
    s: usize,
    draw: Draw,
    scratch: &mut TransitionRow,
) -> Result<f64> {
    let r = match dist {
        ActionDist::Discrete(_) => {
            let (row, r) = cache.get(s, draw.action as usize);
            scratch.clone_from(row);
            *r
        }
        ActionDist::Beta { .. } => {
            let value = env
                .continuous_action(draw.action)
                .ok_or_else(|| CoreError::Contract(format!("{} has no continuous actions", env.id())))?;
            cache.at_value(s, value, scratch)
        }
    };
    if r.is_finite() {
        Ok(r)
    } else {
        Err(numeric(format!("reward at s={s}, action={}", draw.action)))
    }
}

/// The frozen `(μ_t, z_t, o_t)` stream of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub scenario: Scenario,
    /// `T+1` aggregate states with empirical mean fields.
    pub states: Vec<AggregateState>,
    pub observations: Vec<Vec<f64>>,
    /// Population mean of `Σ_t γ^t r_t`.
    pub mean_return: f64,
}

impl SampledSequence {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }
}

/// Steps `num_agents` agents under `behavior` and records the empirical mean
/// field after every step.
pub fn sample_sequence(
    env: &dyn MeanFieldEnv,
    behavior: &dyn Behavior,
    scenario: &Scenario,
    num_agents: usize,
    agent_seed: u64,
) -> Result<SampledSequence> {
    if num_agents == 0 {
        return Err(CoreError::Argument("need at least one agent".into()));
    }
    let spec = env.spec();
    let ns = spec.num_states;
    let mut rng = keyed_rng(agent_seed, stream::AGENTS, u64::MAX);
    let mu0 = scenario.initial.mean_field.probs();
    let mut current: Vec<usize> = (0..num_agents).map(|_| sample_categorical(&mut rng, mu0)).collect();
    let mut g = scenario.initial.clone();
    g.time = 0;
    g.mean_field = MeanField::empirical(ns, &current);
    let mut states = vec![g.clone()];
    let mut observations = vec![env.observe(&g)];
    let mut hidden = behavior.initial_hidden();
    let mut returns = vec![0.0; num_agents];
    let mut disc = 1.0;
    let mut scratch = TransitionRow::new();
    for t in 0..spec.horizon {
        let mut rng = keyed_rng(agent_seed, stream::AGENTS, t as u64);
        let (step, h) = behavior.act(None, &observations[t], &hidden, t == 0)?;
        hidden = h;
        let mut cache = StepCache::new(env, &g);
        let mut next = Vec::with_capacity(num_agents);
        for (i, &s) in current.iter().enumerate() {
            let draw = step.dist.sample(s, &mut rng);
            let r = realize(env, &mut cache, &step.dist, s, draw, &mut scratch)?;
            returns[i] += disc * r;
            next.push(sample_row(&mut rng, &scratch));
        }
        current = next;
        g = AggregateState {
            mean_field: MeanField::empirical(ns, &current),
            noise: env.noise().step_keyed(g.noise, scenario.noise_seed, t),
            time: t + 1,
            statics: g.statics.clone(),
        };
        disc *= spec.discount;
        states.push(g.clone());
        observations.push(env.observe(&g));
    }
    let last = StepCache::new(env, &g);
    for (ret, &s) in returns.iter_mut().zip(&current) {
        if let Some(rt) = last.terminal_reward(s) {
            *ret += disc * rt;
        }
    }
    Ok(SampledSequence {
        scenario: scenario.clone(),
        states,
        observations,
        mean_return: returns.iter().sum::<f64>() / num_agents as f64,
    })
}

/// What the learning agents of one environment did in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    /// `d_t`: this step begins an episode.
    pub start: bool,
    /// Hidden state fed to the policy at this step.
    pub hidden: Vec<f64>,
    pub states: Vec<usize>,
    pub draws: Vec<Draw>,
    pub values: Option<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<usize>,
    pub next_obs: Vec<f64>,
    /// The episode ends after this step.
    pub end: bool,
}

/// Learning agents of one environment, acting against a frozen sequence and
/// restarting from `μ₀` at each episode end. They share the sequence's
/// observations, hence one hidden state.
pub struct Learners {
    pub sequence: Arc<SampledSequence>,
    pub states: Vec<usize>,
    pub t: usize,
    pub hidden: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Learners {
    pub fn new(sequence: Arc<SampledSequence>, count: usize, hidden: Vec<f64>, mut rng: ChaCha8Rng) -> Self {
        let states = Self::reset_states(&sequence, count, &mut rng);
        Self {
            sequence,
            states,
            t: 0,
            hidden,
            rng,
        }
    }

    fn reset_states(sequence: &SampledSequence, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mu0 = sequence.scenario.initial.mean_field.probs();
        (0..count).map(|_| sample_categorical(rng, mu0)).collect()
    }

    /// Policy outputs at the current position without stepping.
    pub fn peek(&self, behavior: &dyn Behavior) -> Result<ActStep> {
        let obs = &self.sequence.observations[self.t];
        Ok(behavior.act(Some(self.states.clone().into()), obs, &self.hidden, self.t == 0)?.0)
    }

    pub fn step(&mut self, env: &dyn MeanFieldEnv, behavior: &dyn Behavior) -> Result<StepRecord> {
        let seq = Arc::clone(&self.sequence);
        let t = self.t;
        let horizon = seq.horizon();
        let obs = seq.observations[t].clone();
        let start = t == 0;
        let (step, h) = behavior.act(Some(self.states.clone().into()), &obs, &self.hidden, start)?;
        let mut cache = StepCache::new(env, &seq.states[t]);
        let mut scratch = TransitionRow::new();
        let n = self.states.len();
        let (mut draws, mut rewards, mut next) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (i, &s) in self.states.iter().enumerate() {
            let draw = step.dist.sample(i, &mut self.rng);
            rewards.push(realize(env, &mut cache, &step.dist, s, draw, &mut scratch)?);
            draws.push(draw);
            next.push(sample_row(&mut self.rng, &scratch));
        }
        let end = t + 1 == horizon;
        if end {
            let last = StepCache::new(env, &seq.states[horizon]);
            for (r, &s) in rewards.iter_mut().zip(&next) {
                if let Some(rt) = last.terminal_reward(s) {
                    *r += env.spec().discount * rt;
                }
            }
        }
        let record = StepRecord {
            obs,
            start,
            hidden: std::mem::replace(&mut self.hidden, h),
            states: std::mem::replace(&mut self.states, next.clone()),
            draws,
            values: step.values,
            rewards,
            next_states: next,
            next_obs: seq.observations[t + 1].clone(),
            end,
        };
        if end {
            self.t = 0;
            self.states = Self::reset_states(&seq, n, &mut self.rng);
            self.hidden = behavior.initial_hidden();
        } else {
            self.t += 1;
        }
        Ok(record)
    }
}
