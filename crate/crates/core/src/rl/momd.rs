//! Mirror-descent Q-learning with an entropy-amended target.
//!
//! The Q-values are the raw outputs of a categorical head; acting uses
//! `softmax(Q/τ)`. With target-network values `Q⁻` and `π⁻ = softmax(Q⁻/τ)`:
//!
//! ```text
//! y = r + α τ log π⁻(a|s) + γ (1 − done) Σ_a' π⁻(a'|s') (Q⁻(s',a') − τ log π⁻(a'|s'))
//! ```

use std::sync::Arc;

use mfax_autodiff::optim::Adam;
use mfax_autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use ndarray::Array2;
use rand::Rng;

use super::sampler::{ActStep, ActionDist, Behavior};
use super::MomdConfig;
use crate::engine::{PolicyMatrix, RolloutPolicy};
use crate::error::{numeric, CoreError, Result};
use crate::policy::PolicyNet;

/// Row-wise `log softmax(q / τ)`.
pub fn log_softmax_tau(q: &[f64], tau: f64) -> Vec<f64> {
    let m = q.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / tau));
    let log_sum = q.iter().map(|&x| (x / tau - m).exp()).sum::<f64>().ln();
    q.iter().map(|&x| (x / tau - m) - log_sum).collect()
}

/// The amended regression target for one transition. `q_s` and `q_next`
/// are target-network values at `s` and `s'`.
#[allow(clippy::too_many_arguments)]
pub fn momd_target(reward: f64, q_s: &[f64], action: usize, q_next: &[f64], done: bool, gamma: f64, tau: f64, alpha: f64) -> f64 {
    let munchausen = alpha * tau * log_softmax_tau(q_s, tau)[action];
    if done {
        return reward + munchausen;
    }
    let lp = log_softmax_tau(q_next, tau);
    let soft: f64 = q_next.iter().zip(&lp).map(|(q, l)| l.exp() * (q - tau * l)).sum();
    reward + munchausen + gamma * soft
}

/// Ring buffer of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    next: usize,
    pub states: Vec<usize>,
    pub observations: Vec<Arc<[f64]>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<usize>,
    pub next_observations: Vec<Arc<[f64]>>,
    pub dones: Vec<bool>,
}

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub obs: Arc<[f64]>,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub next_obs: Arc<[f64]>,
    pub done: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            next: 0,
            states: Vec::new(),
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            next_observations: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn clear(&mut self) {
        *self = Self::new(self.capacity);
    }

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.len() < self.capacity {
            self.states.push(t.state);
            self.observations.push(t.obs);
            self.actions.push(t.action);
            self.rewards.push(t.reward);
            self.next_states.push(t.next_state);
            self.next_observations.push(t.next_obs);
            self.dones.push(t.done);
        } else {
            let k = self.next;
            self.states[k] = t.state;
            self.observations[k] = t.obs;
            self.actions[k] = t.action;
            self.rewards[k] = t.reward;
            self.next_states[k] = t.next_state;
            self.next_observations[k] = t.next_obs;
            self.dones[k] = t.done;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform indices, with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Vec<usize> {
        (0..batch).map(|_| rng.gen_range(0..self.len())).collect()
    }
}

/// Q-values for per-row `(state, observation)` pairs under a memoryless net.
pub fn q_rows<'t>(net: &PolicyNet, b: &Bound<'t>, tape: &'t Tape, states: &[usize], obs: &[&[f64]]) -> Result<Var<'t>> {
    if net.is_recurrent() {
        return Err(CoreError::Contract("Q-learning needs a memoryless network".into()));
    }
    let ctx = net.state_context(b, tape, Some(states.iter().copied().collect()))?;
    let x = net.obs_input(tape, obs)?;
    let (code, _) = net.obs_step(b, tape, x, None, false)?;
    Ok(net.head(b, &ctx, code)?.logits)
}

fn q_values(net: &PolicyNet, params: &ParamStore, states: &[usize], obs: &[&[f64]]) -> Result<Tensor> {
    let tape = Tape::new();
    let b = params.bind_frozen(&tape);
    Ok(q_rows(net, &b, &tape, states, obs)?.value().as_ref().clone())
}

/// Targets for a batch, from the target parameters.
pub fn batch_targets(net: &PolicyNet, target: &ParamStore, replay: &ReplayBuffer, idx: &[usize], gamma: f64, config: &MomdConfig) -> Result<Vec<f64>> {
    let s: Vec<usize> = idx.iter().map(|&k| replay.states[k]).collect();
    let o: Vec<&[f64]> = idx.iter().map(|&k| &*replay.observations[k]).collect();
    let s2: Vec<usize> = idx.iter().map(|&k| replay.next_states[k]).collect();
    let o2: Vec<&[f64]> = idx.iter().map(|&k| &*replay.next_observations[k]).collect();
    let q = q_values(net, target, &s, &o)?;
    let q2 = q_values(net, target, &s2, &o2)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            momd_target(
                replay.rewards[k],
                q.row(j).as_slice().expect("row-major"),
                replay.actions[k],
                q2.row(j).as_slice().expect("row-major"),
                replay.dones[k],
                gamma,
                config.tau,
                config.alpha,
            )
        })
        .collect())
}

/// One regression step of `Q(s, a)` towards the batch targets; returns
/// `(loss, grad_norm)`.
#[allow(clippy::too_many_arguments)]
pub fn momd_update(
    net: &mut PolicyNet,
    target: &ParamStore,
    opt: &mut Adam,
    replay: &ReplayBuffer,
    idx: &[usize],
    gamma: f64,
    config: &MomdConfig,
    step: usize,
    total_steps: usize,
) -> Result<(f64, f64)> {
    let y = batch_targets(net, target, replay, idx, gamma, config)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(numeric("M-OMD target"));
    }
    let tape = Tape::new();
    let b = net.params.bind(&tape);
    let s: Vec<usize> = idx.iter().map(|&k| replay.states[k]).collect();
    let o: Vec<&[f64]> = idx.iter().map(|&k| &*replay.observations[k]).collect();
    let q = q_rows(net, &b, &tape, &s, &o)?;
    let a: Arc<[usize]> = idx.iter().map(|&k| replay.actions[k]).collect();
    let y = tape.constant(Array2::from_shape_vec((y.len(), 1), y).expect("n x 1"));
    let loss = q.select_cols(a)?.sub(y)?.square()?.mean_all()?;
    let value = loss.item();
    let grads = b.grads(&tape.backward(loss)?);
    let info = opt.step(&mut net.params, &grads, step, total_steps);
    Ok((value, info.grad_norm))
}

/// `softmax(Q/τ)` mixed with `ε`-uniform exploration.
pub struct SoftmaxQ<'a> {
    pub net: &'a PolicyNet,
    pub tau: f64,
    pub epsilon: f64,
}

impl SoftmaxQ<'_> {
    /// Row-wise log-probabilities for `states` (all when `None`).
    pub fn log_policy(&self, states: Option<Arc<[usize]>>, obs: &[f64]) -> Result<Tensor> {
        let (rows, _) = self.net.evaluate_rows(states, obs, &[], false)?;
        let na = rows.logits.ncols() as f64;
        let mut out = rows.logits.clone();
        for (q, mut o) in rows.logits.rows().into_iter().zip(out.rows_mut()) {
            let lp = log_softmax_tau(q.as_slice().expect("row-major"), self.tau);
            for (x, l) in o.iter_mut().zip(lp) {
                *x = if self.epsilon > 0.0 {
                    ((1.0 - self.epsilon) * l.exp() + self.epsilon / na).ln()
                } else {
                    l
                };
            }
        }
        Ok(out)
    }
}

impl Behavior for SoftmaxQ<'_> {
    fn initial_hidden(&self) -> Vec<f64> {
        Vec::new()
    }

    fn act(&self, states: Option<Arc<[usize]>>, obs: &[f64], _hidden: &[f64], _done: bool) -> Result<(ActStep, Vec<f64>)> {
        Ok((
            ActStep {
                dist: ActionDist::Discrete(self.log_policy(states, obs)?),
                values: None,
            },
            Vec::new(),
        ))
    }
}

impl RolloutPolicy for SoftmaxQ<'_> {
    fn initial_hidden(&self) -> Vec<f64> {
        Vec::new()
    }

    fn policy_step(&self, _t: usize, obs: &[f64], _hidden: &[f64], _done: bool) -> Result<(PolicyMatrix, Vec<f64>)> {
        Ok((self.log_policy(None, obs)?.mapv(f64::exp), Vec::new()))
    }
}

/// Linear decay from `start` to `end` over the first `fraction` of training.
pub fn epsilon_at(progress: f64, config: &MomdConfig) -> f64 {
    let frac = if config.epsilon_fraction > 0.0 {
        (progress / config.epsilon_fraction).min(1.0)
    } else {
        1.0
    };
    config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_buffer_overwrites_oldest() {
        let mut rb = ReplayBuffer::new(2);
        let obs: Arc<[f64]> = vec![0.0].into();
        for k in 0..3 {
            rb.push(Transition {
                state: k,
                obs: obs.clone(),
                action: 0,
                reward: k as f64,
                next_state: 0,
                next_obs: obs.clone(),
                done: false,
            });
        }
        assert_eq!(rb.len(), 2);
        assert_eq!(rb.states, vec![2, 1]);
    }

    #[test]
    fn epsilon_schedule() {
        let c = MomdConfig::default();
        assert_eq!(epsilon_at(0.0, &c), 1.0);
        assert!((epsilon_at(0.25, &c) - 0.55).abs() < 1e-12);
        assert!((epsilon_at(0.9, &c) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_is_normalized() {
        let lp = log_softmax_tau(&[1000.0, 1001.0, -3.0], 0.05);
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
