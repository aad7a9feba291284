//! On-policy segments and generalized advantage estimation.

use super::sampler::StepRecord;
use crate::error::{CoreError, Result};

/// GAE over one agent's segment.
///
/// `ends[t]` marks the last step of an episode; `bootstrap` is the value of
/// the state following the segment. Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], ends: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if ends[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 == n { bootstrap } else { values[t + 1] };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Contiguous steps of one environment's learning agents. Per-step arrays
/// are `steps x agents`, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segment {
    /// Hidden state fed to the policy at the first step.
    pub h0: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub starts: Vec<bool>,
    pub ends: Vec<bool>,
    pub states: Vec<Vec<usize>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
    /// Value of each agent's state after the last step.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_agents(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if self.is_empty() {
            self.h0 = record.hidden.clone();
        }
        let values = record
            .values
            .ok_or_else(|| CoreError::Contract("policy has no value head".into()))?;
        self.observations.push(record.obs);
        self.starts.push(record.start);
        self.ends.push(record.end);
        self.states.push(record.states);
        self.actions.push(record.draws.iter().map(|d| d.action).collect());
        self.log_probs.push(record.draws.iter().map(|d| d.log_prob).collect());
        self.values.push(values);
        self.rewards.push(record.rewards);
        Ok(())
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        let (steps, n) = (self.len(), self.num_agents());
        self.advantages = vec![vec![0.0; n]; steps];
        self.returns = vec![vec![0.0; n]; steps];
        for i in 0..n {
            let r: Vec<f64> = self.rewards.iter().map(|row| row[i]).collect();
            let v: Vec<f64> = self.values.iter().map(|row| row[i]).collect();
            let (adv, ret) = gae(&r, &v, &self.ends, self.bootstrap[i], gamma, lambda);
            for t in 0..steps {
                self.advantages[t][i] = adv[t];
                self.returns[t][i] = ret[t];
            }
        }
    }
}

/// One segment per environment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub segments: Vec<Segment>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.len() * s.num_agents()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(segment, step, agent)` for every sample.
    pub fn indices(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for (e, seg) in self.segments.iter().enumerate() {
            for t in 0..seg.len() {
                for i in 0..seg.num_agents() {
                    out.push((e, t, i));
                }
            }
        }
        out
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) {
        self.segments.iter_mut().for_each(|s| s.compute_advantages(gamma, lambda));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_one_gives_discounted_returns() {
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, -1.0, 2.0];
        let (adv, ret) = gae(&r, &v, &[false, false, false], 4.0, 0.9, 1.0);
        let g2 = 3.0 + 0.9 * 4.0;
        let g1 = 2.0 + 0.9 * g2;
        let g0 = 1.0 + 0.9 * g1;
        for (x, y) in ret.iter().zip([g0, g1, g2]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((adv[0] - (g0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn episode_end_cuts_bootstrap() {
        let (adv, _) = gae(&[1.0, 1.0], &[0.0, 10.0], &[true, true], 100.0, 1.0, 1.0);
        assert_eq!(adv, vec![1.0, -9.0]);
    }
}
