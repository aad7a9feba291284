//! Best responses by backward induction and exploitability.
//!
//! A best response is computed against a frozen mean-field and noise
//! sequence and may condition on time and the realized sequence, so it is a
//! strictly richer class than the reduced policies being evaluated.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{analytic_rollout, expected_next, expected_reward, AnalyticTrajectory, PolicyMatrix, RolloutPolicy, TablePolicy};
use crate::env::{MeanFieldEnv, Scenario};
use crate::error::{CoreError, Result};

/// Output of [`best_response`].
#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    /// `J* = μ₀ · V₀`.
    pub value: f64,
    /// `V_0 … V_T`.
    pub values: Vec<Vec<f64>>,
    /// Greedy action per `(t, s)`; ties go to the lowest index.
    pub greedy: Vec<Vec<usize>>,
}

impl BestResponse {
    pub fn policy(&self, num_actions: usize) -> TablePolicy {
        TablePolicy {
            actions: self.greedy.clone(),
            num_actions,
        }
    }
}

/// `V_T = 0`, `V_t(s) = max_a R_t(s,a) + γ Σ_{s'} T_t(s'|s,a) V_{t+1}(s')`
/// over the trajectory's stored rewards and rebuilt transition tables.
pub fn best_response(env: &dyn MeanFieldEnv, traj: &AnalyticTrajectory) -> Result<BestResponse> {
    let spec = env.spec();
    let (ns, na) = (spec.num_states, spec.num_actions);
    let horizon = traj.horizon();
    let tables = traj.transition_tables(env);
    let mut values = vec![vec![0.0; ns]; horizon + 1];
    let mut greedy = vec![vec![0; ns]; horizon];
    for t in (0..horizon).rev() {
        let q = tables[t].q_values(&values[t + 1]);
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let x = traj.rewards[t][[s, a]] + spec.discount * q[[s, a]];
                if x > best {
                    best = x;
                    greedy[t][s] = a;
                }
            }
            values[t][s] = best;
        }
    }
    let value = traj.mean_field(0).expect(|s| values[0][s]);
    Ok(BestResponse {
        value,
        values,
        greedy,
    })
}

/// `μ₀ · v₀` of arbitrary per-step policies against the trajectory's frozen
/// sequence.
pub fn value_on_sequence(env: &dyn MeanFieldEnv, traj: &AnalyticTrajectory, policies: &[PolicyMatrix]) -> Result<f64> {
    if policies.len() != traj.horizon() {
        return Err(CoreError::Argument(format!(
            "{} policies for horizon {}",
            policies.len(),
            traj.horizon()
        )));
    }
    let gamma = env.spec().discount;
    let tables = traj.transition_tables(env);
    let mut v = vec![0.0; env.spec().num_states];
    for t in (0..traj.horizon()).rev() {
        let r = expected_reward(&policies[t], &traj.rewards[t])?;
        let cont = expected_next(&v, &policies[t], &tables[t]);
        v = r.iter().zip(&cont).map(|(r, c)| r + gamma * c).collect();
    }
    Ok(traj.mean_field(0).expect(|s| v[s]))
}

/// One-hot matrices of a deterministic table.
pub fn table_matrices(table: &TablePolicy, num_states: usize) -> Vec<PolicyMatrix> {
    table
        .actions
        .iter()
        .map(|row| {
            let mut pi = Array2::zeros((num_states, table.num_actions));
            row.iter().enumerate().for_each(|(s, &a)| pi[[s, a]] = 1.0);
            pi
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceEval {
    pub label: String,
    /// `J*` against this sequence.
    pub best_response: f64,
    /// `J(π, π)` on this sequence.
    pub value: f64,
}

impl SequenceEval {
    pub fn gap(&self) -> f64 {
        self.best_response - self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub exploitability: f64,
    pub mean_return: f64,
    pub num_sequences: usize,
    pub per_sequence: Vec<SequenceEval>,
    pub wall_clock_s: f64,
}

/// `J(π, π)` averaged over scenarios.
pub fn expected_return(env: &dyn MeanFieldEnv, policy: &dyn RolloutPolicy, scenarios: &[Scenario]) -> Result<f64> {
    if scenarios.is_empty() {
        return Err(CoreError::Argument("no evaluation scenarios".into()));
    }
    let gamma = env.spec().discount;
    let values: Vec<f64> = scenarios
        .par_iter()
        .map(|s| analytic_rollout(env, policy, s)?.discounted_return(gamma))
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean over scenarios of `J* − J(π, π)` on identical sequences.
pub fn exploitability(env: &dyn MeanFieldEnv, policy: &dyn RolloutPolicy, scenarios: &[Scenario]) -> Result<EvalReport> {
    if scenarios.is_empty() {
        return Err(CoreError::Argument("no evaluation scenarios".into()));
    }
    let start = Instant::now();
    let gamma = env.spec().discount;
    let per_sequence: Vec<SequenceEval> = scenarios
        .par_iter()
        .map(|s| {
            let traj = analytic_rollout(env, policy, s)?;
            Ok(SequenceEval {
                label: s.label.clone(),
                best_response: best_response(env, &traj)?.value,
                value: traj.discounted_return(gamma)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_sequence.len() as f64;
    Ok(EvalReport {
        exploitability: per_sequence.iter().map(SequenceEval::gap).sum::<f64>() / n,
        mean_return: per_sequence.iter().map(|e| e.value).sum::<f64>() / n,
        num_sequences: per_sequence.len(),
        per_sequence,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Default number of sampled sequences (or bar locations) per environment.
pub fn default_sequence_count(env_id: &str) -> usize {
    match env_id {
        "beach_bar" => 16,
        _ => 8,
    }
}

/// The evaluation scenarios used throughout: enumerated binary noise for the
/// toy games, sampled paths otherwise.
pub fn eval_scenarios(env: &dyn MeanFieldEnv, count: Option<usize>, seed: u64) -> Vec<Scenario> {
    env.eval_scenarios(count.unwrap_or_else(|| default_sequence_count(env.id())), seed)
}
