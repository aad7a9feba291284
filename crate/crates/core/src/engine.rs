//! Analytic (matrix-free) and sample-based mean-field updates.
//!
//! The transition operator `A` is never materialized. Each step builds a
//! compressed table of next-state supports per `(s, a)`; the pushforward
//! `μ' = Aᵀμ` and the expectation `A v` are sparse contractions against it.

use std::sync::Arc;

use mfax_autodiff::dist::sample_categorical;
use mfax_autodiff::{Tensor, Var};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::env::{MeanFieldEnv, Scenario};
use crate::error::{numeric, CoreError, Result};
use crate::noise::{keyed_rng, stream};
use crate::types::{AggregateState, MeanField, TransitionRow};

/// `|S| x |A|` row-stochastic matrix of action probabilities.
pub type PolicyMatrix = Array2<f64>;

/// Row-sum tolerance for a policy matrix accepted by the engine.
pub const POLICY_TOL: f64 = 1e-6;

/// Mass drift above which the pushforward output is renormalized.
pub const DRIFT_TOL: f64 = 1e-12;

/// Next-state supports for every `(s, a)` at one aggregate state, in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    num_states: usize,
    num_actions: usize,
    offsets: Vec<usize>,
    next: Vec<u32>,
    prob: Vec<f64>,
}

impl TransitionTable {
    pub fn build(env: &dyn MeanFieldEnv, g: &AggregateState, agg: &[f64]) -> Self {
        let spec = env.spec();
        let (ns, na) = (spec.num_states, spec.num_actions);
        let mut offsets = Vec::with_capacity(ns * na + 1);
        let mut next = Vec::with_capacity(ns * na * spec.idio_noise.support.len());
        let mut prob = Vec::with_capacity(next.capacity());
        let mut row = TransitionRow::new();
        offsets.push(0);
        let actions: Vec<f64> = (0..na).map(|a| env.action_value(a)).collect();
        for s in 0..ns {
            for &action in &actions {
                env.transition_at(s, action, g, agg, &mut row);
                for &(n, p) in &row {
                    next.push(n as u32);
                    prob.push(p);
                }
                offsets.push(next.len());
            }
        }
        Self {
            num_states: ns,
            num_actions: na,
            offsets,
            next,
            prob,
        }
    }

    /// From explicit rows indexed `[s][a]`.
    pub fn from_rows(rows: &[Vec<TransitionRow>]) -> Self {
        let ns = rows.len();
        let na = rows.first().map_or(0, |r| r.len());
        let mut offsets = vec![0];
        let mut next = Vec::new();
        let mut prob = Vec::new();
        for per_state in rows {
            for row in per_state {
                for &(n, p) in row {
                    next.push(n as u32);
                    prob.push(p);
                }
                offsets.push(next.len());
            }
        }
        Self {
            num_states: ns,
            num_actions: na,
            offsets,
            next,
            prob,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn nnz(&self) -> usize {
        self.next.len()
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> (&[u32], &[f64]) {
        let k = s * self.num_actions + a;
        let (lo, hi) = (self.offsets[k], self.offsets[k + 1]);
        (&self.next[lo..hi], &self.prob[lo..hi])
    }

    /// Every row sums to one within `tol` and stays on the grid.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let (next, prob) = self.row(s, a);
                if let Some(n) = next.iter().find(|&&n| n as usize >= self.num_states) {
                    return Err(CoreError::Contract(format!(
                        "transition ({s}, {a}) leaves the grid at {n}"
                    )));
                }
                let total: f64 = prob.iter().sum();
                if (total - 1.0).abs() > tol || prob.iter().any(|p| *p < 0.0) {
                    return Err(CoreError::Contract(format!(
                        "transition ({s}, {a}) has mass {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `q(s, a) = Σ_{s'} T(s'|s,a) v(s')`.
    pub fn q_values(&self, v: &[f64]) -> Array2<f64> {
        let mut q = Array2::zeros((self.num_states, self.num_actions));
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let (next, prob) = self.row(s, a);
                q[[s, a]] = next
                    .iter()
                    .zip(prob)
                    .map(|(&n, p)| p * v[n as usize])
                    .sum();
            }
        }
        q
    }
}

/// Transition table and reward matrix for one step.
#[derive(Debug, Clone)]
pub struct StepTables {
    pub transitions: Arc<TransitionTable>,
    pub rewards: Array2<f64>,
}

pub fn step_tables(env: &dyn MeanFieldEnv, g: &AggregateState) -> Result<StepTables> {
    let agg = env.aggregates(g);
    let spec = env.spec();
    let transitions = Arc::new(TransitionTable::build(env, g, &agg));
    let mut rewards = Array2::zeros((spec.num_states, spec.num_actions));
    for s in 0..spec.num_states {
        for a in 0..spec.num_actions {
            let r = env.reward_at(s, env.action_value(a), g, &agg);
            if !r.is_finite() {
                return Err(numeric(format!("reward at s={s}, a={a}, t={}", g.time)));
            }
            rewards[[s, a]] = r;
        }
    }
    Ok(StepTables {
        transitions,
        rewards,
    })
}

/// Checks shape, nonnegativity and row sums of a policy matrix.
pub fn check_policy(pi: &PolicyMatrix, num_states: usize, num_actions: usize) -> Result<()> {
    if pi.dim() != (num_states, num_actions) {
        return Err(CoreError::Argument(format!(
            "policy matrix is {:?}, expected ({num_states}, {num_actions})",
            pi.dim()
        )));
    }
    for (s, row) in pi.rows().into_iter().enumerate() {
        let total: f64 = row.sum();
        if !total.is_finite() || (total - 1.0).abs() > POLICY_TOL || row.iter().any(|p| *p < 0.0)
        {
            return Err(CoreError::Contract(format!(
                "policy row {s} sums to {total}"
            )));
        }
    }
    Ok(())
}

/// `μ'(s') = Σ_s Σ_a μ(s) Π(s,a) T(s'|s,a)`.
pub fn pushforward(mu: &[f64], pi: &PolicyMatrix, table: &TransitionTable) -> Result<Vec<f64>> {
    let (ns, na) = (table.num_states, table.num_actions);
    if mu.len() != ns {
        return Err(CoreError::Argument(format!(
            "mean field has {} entries, table has {ns} states",
            mu.len()
        )));
    }
    check_policy(pi, ns, na)?;
    let mut out = vec![0.0; ns];
    for s in 0..ns {
        let m = mu[s];
        if m == 0.0 {
            continue;
        }
        for a in 0..na {
            let w = m * pi[[s, a]];
            if w == 0.0 {
                continue;
            }
            let (next, prob) = table.row(s, a);
            for (&n, p) in next.iter().zip(prob) {
                out[n as usize] += w * p;
            }
        }
    }
    let total: f64 = out.iter().sum();
    if !total.is_finite() {
        return Err(numeric("pushforward"));
    }
    if (total - 1.0).abs() > DRIFT_TOL {
        log::warn!("pushforward mass drifted to {total}; renormalizing");
        out.iter_mut().for_each(|p| *p /= total);
    }
    Ok(out)
}

/// `out(s) = Σ_a Π(s,a) Σ_{s'} T(s'|s,a) v(s')`.
pub fn expected_next(v: &[f64], pi: &PolicyMatrix, table: &TransitionTable) -> Vec<f64> {
    let (ns, na) = (table.num_states, table.num_actions);
    let mut out = vec![0.0; ns];
    for (s, o) in out.iter_mut().enumerate() {
        for a in 0..na {
            let w = pi[[s, a]];
            if w == 0.0 {
                continue;
            }
            let (next, prob) = table.row(s, a);
            let q: f64 = next.iter().zip(prob).map(|(&n, p)| p * v[n as usize]).sum();
            *o += w * q;
        }
    }
    out
}

/// `r̃(s) = Σ_a Π(s,a) R(s,a)`.
pub fn expected_reward(pi: &PolicyMatrix, rewards: &Array2<f64>) -> Result<Vec<f64>> {
    if pi.dim() != rewards.dim() {
        return Err(CoreError::Argument(format!(
            "policy {:?} and reward {:?} shapes differ",
            pi.dim(),
            rewards.dim()
        )));
    }
    Ok(pi
        .rows()
        .into_iter()
        .zip(rewards.rows())
        .map(|(p, r)| p.dot(&r))
        .collect())
}

/// [`expected_next`] on a tape, differentiable in both `Π` (`|S| x |A|`) and
/// `v` (`|S| x 1`). Returns `|S| x 1`.
pub fn expected_next_var<'t>(
    pi: Var<'t>,
    v: Var<'t>,
    table: Arc<TransitionTable>,
) -> Result<Var<'t>> {
    let (ns, na) = (table.num_states, table.num_actions);
    if pi.shape() != (ns, na) || v.shape() != (ns, 1) {
        return Err(CoreError::Argument(format!(
            "expected_next: policy {:?}, value {:?}, table ({ns}, {na})",
            pi.shape(),
            v.shape()
        )));
    }
    let pv = pi.value();
    let vv = v.value();
    let q = table.q_values(vv.as_slice().expect("contiguous"));
    let mut out = Array2::zeros((ns, 1));
    for s in 0..ns {
        out[[s, 0]] = pv.row(s).dot(&q.row(s));
    }
    let tape = pi.tape();
    let var = tape.push(
        "expected_next",
        &[pi, v],
        out,
        Box::new(move |g: &Tensor, parents: &[&Tensor], _| {
            let pi = parents[0];
            let mut dpi = q.clone();
            for (s, mut row) in dpi.rows_mut().into_iter().enumerate() {
                row *= g[[s, 0]];
            }
            let mut dv = Array2::zeros((ns, 1));
            for s in 0..ns {
                let gs = g[[s, 0]];
                if gs == 0.0 {
                    continue;
                }
                for a in 0..na {
                    let w = gs * pi[[s, a]];
                    if w == 0.0 {
                        continue;
                    }
                    let (next, prob) = table.row(s, a);
                    for (&n, p) in next.iter().zip(prob) {
                        dv[[n as usize, 0]] += w * p;
                    }
                }
            }
            vec![Some(dpi), Some(dv)]
        }),
    )?;
    Ok(var)
}

/// Folds a terminal reward into the last step's reward matrix:
/// `R_{T−1}(s,a) += γ Σ_{s'} T(s'|s,a) R_T(s')`.
pub fn fold_terminal(
    env: &dyn MeanFieldEnv,
    last: &TransitionTable,
    rewards: &mut Array2<f64>,
    g_terminal: &AggregateState,
) -> Result<()> {
    let agg = env.aggregates(g_terminal);
    let ns = env.spec().num_states;
    let mut terminal = Vec::with_capacity(ns);
    for s in 0..ns {
        match env.terminal_reward(s, g_terminal, &agg) {
            Some(r) if r.is_finite() => terminal.push(r),
            Some(_) => return Err(numeric(format!("terminal reward at s={s}"))),
            None => return Ok(()),
        }
    }
    let q = last.q_values(&terminal);
    let gamma = env.spec().discount;
    rewards.zip_mut_with(&q, |r, q| *r += gamma * q);
    Ok(())
}

/// A policy the engine can query: one call per step yields the whole
/// `|S| x |A|` matrix for the shared observation.
pub trait RolloutPolicy: Sync {
    fn initial_hidden(&self) -> Vec<f64> {
        Vec::new()
    }

    /// `(Π_t, h_{t+1}) = π(· | s, o_t, h_t, d_t)`.
    fn policy_step(
        &self,
        t: usize,
        obs: &[f64],
        hidden: &[f64],
        done: bool,
    ) -> Result<(PolicyMatrix, Vec<f64>)>;
}

impl<P: RolloutPolicy + ?Sized> RolloutPolicy for &P {
    fn initial_hidden(&self) -> Vec<f64> {
        (**self).initial_hidden()
    }

    fn policy_step(&self, t: usize, obs: &[f64], hidden: &[f64], done: bool) -> Result<(PolicyMatrix, Vec<f64>)> {
        (**self).policy_step(t, obs, hidden, done)
    }
}

/// The same matrix at every step.
#[derive(Debug, Clone)]
pub struct FixedPolicy(pub PolicyMatrix);

impl FixedPolicy {
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self(Array2::from_elem(
            (num_states, num_actions),
            1.0 / num_actions as f64,
        ))
    }
}

impl RolloutPolicy for FixedPolicy {
    fn policy_step(&self, _: usize, _: &[f64], _: &[f64], _: bool) -> Result<(PolicyMatrix, Vec<f64>)> {
        Ok((self.0.clone(), Vec::new()))
    }
}

/// A deterministic time-indexed table `actions[t][s]`.
#[derive(Debug, Clone)]
pub struct TablePolicy {
    pub actions: Vec<Vec<usize>>,
    pub num_actions: usize,
}

impl RolloutPolicy for TablePolicy {
    fn policy_step(&self, t: usize, _: &[f64], _: &[f64], _: bool) -> Result<(PolicyMatrix, Vec<f64>)> {
        let row = self.actions.get(t).ok_or_else(|| {
            CoreError::Argument(format!("table policy has no entry for step {t}"))
        })?;
        let mut pi = Array2::zeros((row.len(), self.num_actions));
        for (s, &a) in row.iter().enumerate() {
            pi[[s, a]] = 1.0;
        }
        Ok((pi, Vec::new()))
    }
}

/// Everything an analytic rollout produces.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticTrajectory {
    pub env_id: String,
    pub label: String,
    pub noise_seed: u64,
    /// `g_0 … g_T`.
    pub states: Vec<AggregateState>,
    /// `o_0 … o_T`.
    pub observations: Vec<Vec<f64>>,
    /// `Π_0 … Π_{T−1}`.
    pub policies: Vec<PolicyMatrix>,
    /// `R_0 … R_{T−1}`, terminal reward folded into the last.
    pub rewards: Vec<Array2<f64>>,
}

impl AnalyticTrajectory {
    pub fn horizon(&self) -> usize {
        self.policies.len()
    }

    pub fn mean_field(&self, t: usize) -> &MeanField {
        &self.states[t].mean_field
    }

    pub fn noises(&self) -> Vec<f64> {
        self.states.iter().map(|g| g.noise).collect()
    }

    /// Transition tables rebuilt from the stored aggregate states.
    pub fn transition_tables(&self, env: &dyn MeanFieldEnv) -> Vec<Arc<TransitionTable>> {
        self.states[..self.horizon()]
            .iter()
            .map(|g| Arc::new(TransitionTable::build(env, g, &env.aggregates(g))))
            .collect()
    }

    /// `Σ_t γ^t μ_t · r̃_t`.
    pub fn discounted_return(&self, gamma: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut disc = 1.0;
        for t in 0..self.horizon() {
            let r = expected_reward(&self.policies[t], &self.rewards[t])?;
            let mu = self.mean_field(t).probs();
            total += disc * mu.iter().zip(&r).map(|(m, r)| m * r).sum::<f64>();
            disc *= gamma;
        }
        Ok(total)
    }
}

/// Runs one analytic rollout from `scenario`, asking `policy_fn(t, o_t, d_t)`
/// for each `Π_t`. Returns the trajectory and, when `keep_tables`, the
/// per-step transition tables.
pub fn analytic_rollout_with<F>(
    env: &dyn MeanFieldEnv,
    scenario: &Scenario,
    keep_tables: bool,
    mut policy_fn: F,
) -> Result<(AnalyticTrajectory, Vec<Arc<TransitionTable>>)>
where
    F: FnMut(usize, &[f64], bool) -> Result<PolicyMatrix>,
{
    let spec = env.spec();
    let horizon = spec.horizon;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut observations = Vec::with_capacity(horizon + 1);
    let mut policies = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut tables = Vec::new();
    let mut last_table = None;

    let mut g = scenario.initial.clone();
    g.time = 0;
    observations.push(env.observe(&g));
    for t in 0..horizon {
        let pi = policy_fn(t, &observations[t], t == 0)?;
        check_policy(&pi, spec.num_states, spec.num_actions)
            .map_err(|e| CoreError::Contract(format!("step {t}: {e}")))?;
        let StepTables {
            transitions,
            rewards: r,
        } = step_tables(env, &g)?;
        let next_mu = pushforward(g.mean_field.probs(), &pi, &transitions)
            .map_err(|e| match e {
                CoreError::Numeric { .. } => numeric(format!("mean field at step {}", t + 1)),
                other => other,
            })?;
        let next = AggregateState {
            mean_field: MeanField::new(next_mu)
                .map_err(|e| CoreError::Contract(format!("step {}: {e}", t + 1)))?,
            noise: env.noise().step_keyed(g.noise, scenario.noise_seed, t),
            time: t + 1,
            statics: g.statics.clone(),
        };
        policies.push(pi);
        rewards.push(r);
        if keep_tables {
            tables.push(Arc::clone(&transitions));
        }
        last_table = Some(transitions);
        states.push(std::mem::replace(&mut g, next));
        observations.push(env.observe(&g));
    }
    if let (Some(table), Some(r)) = (last_table, rewards.last_mut()) {
        fold_terminal(env, &table, r, &g)?;
    }
    states.push(g);
    Ok((
        AnalyticTrajectory {
            env_id: env.id().to_string(),
            label: scenario.label.clone(),
            noise_seed: scenario.noise_seed,
            states,
            observations,
            policies,
            rewards,
        },
        tables,
    ))
}

/// One analytic rollout of a [`RolloutPolicy`].
pub fn analytic_rollout(
    env: &dyn MeanFieldEnv,
    policy: &dyn RolloutPolicy,
    scenario: &Scenario,
) -> Result<AnalyticTrajectory> {
    let mut hidden = policy.initial_hidden();
    analytic_rollout_with(env, scenario, false, |t, obs, done| {
        let (pi, h) = policy.policy_step(t, obs, &hidden, done)?;
        hidden = h;
        Ok(pi)
    })
    .map(|(traj, _)| traj)
}

/// `E` rollouts from the training scenarios of `seed`, in parallel, returned
/// in environment-index order.
pub fn analytic_rollouts(
    env: &dyn MeanFieldEnv,
    policy: &dyn RolloutPolicy,
    seed: u64,
    count: usize,
) -> Result<Vec<AnalyticTrajectory>> {
    (0..count)
        .into_par_iter()
        .map(|i| analytic_rollout(env, policy, &env.scenario(seed, i)))
        .collect()
}

/// Per-agent record of a sample-based rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    /// `T+1` rows of `N` agent states.
    pub states: Vec<Vec<u32>>,
    /// `T` rows of `N` action indices.
    pub actions: Vec<Vec<u32>>,
    /// `T` rows of `N` rewards (terminal reward added to the last row).
    pub rewards: Vec<Vec<f64>>,
    /// Empirical mean fields `μ_0 … μ_T`.
    pub mean_fields: Vec<MeanField>,
    pub noises: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    /// `d_t`: 1 at the first step of an episode.
    pub dones: Vec<bool>,
}

/// Lazily filled per-step cache of transition rows and rewards.
pub(crate) struct StepCache<'a> {
    env: &'a dyn MeanFieldEnv,
    g: &'a AggregateState,
    agg: Vec<f64>,
    rows: Vec<Option<(TransitionRow, f64)>>,
    num_actions: usize,
}

impl<'a> StepCache<'a> {
    pub(crate) fn new(env: &'a dyn MeanFieldEnv, g: &'a AggregateState) -> Self {
        let spec = env.spec();
        Self {
            env,
            g,
            agg: env.aggregates(g),
            rows: vec![None; spec.num_states * spec.num_actions],
            num_actions: spec.num_actions,
        }
    }

    pub(crate) fn get(&mut self, s: usize, a: usize) -> &(TransitionRow, f64) {
        let k = s * self.num_actions + a;
        if self.rows[k].is_none() {
            let action = self.env.action_value(a);
            let mut row = TransitionRow::new();
            self.env.transition_at(s, action, self.g, &self.agg, &mut row);
            let r = self.env.reward_at(s, action, self.g, &self.agg);
            self.rows[k] = Some((row, r));
        }
        self.rows[k].as_ref().expect("filled above")
    }

    /// Uncached row and reward for a real-valued action.
    pub(crate) fn at_value(&self, s: usize, action: f64, out: &mut TransitionRow) -> f64 {
        out.clear();
        self.env.transition_at(s, action, self.g, &self.agg, out);
        self.env.reward_at(s, action, self.g, &self.agg)
    }

    pub(crate) fn terminal_reward(&self, s: usize) -> Option<f64> {
        self.env.terminal_reward(s, self.g, &self.agg)
    }
}

/// Draws an index from sparse `(index, prob)` pairs.
pub fn sample_row<R: Rng + ?Sized>(rng: &mut R, row: &[(usize, f64)]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(s, p) in row {
        acc += p;
        if u < acc {
            return s;
        }
    }
    row.iter().rev().find(|(_, p)| *p > 0.0).map_or(0, |r| r.0)
}

/// `N` agents stepped by sampling; the mean field is re-estimated as their
/// empirical distribution each step. Common noise follows the scenario's
/// keyed stream, so it matches [`analytic_rollout`] on the same scenario.
pub fn sample_rollout(
    env: &dyn MeanFieldEnv,
    policy: &dyn RolloutPolicy,
    scenario: &Scenario,
    num_agents: usize,
    agent_seed: u64,
) -> Result<SampleTrajectory> {
    if num_agents == 0 {
        return Err(CoreError::Argument("need at least one agent".into()));
    }
    let spec = env.spec();
    let ns = spec.num_states;
    let mut rng = keyed_rng(agent_seed, stream::AGENTS, u64::MAX);
    let mu0 = scenario.initial.mean_field.probs();
    let mut current: Vec<usize> = (0..num_agents)
        .map(|_| sample_categorical(&mut rng, mu0))
        .collect();

    let mut g = scenario.initial.clone();
    g.time = 0;
    g.mean_field = MeanField::empirical(ns, &current);
    let mut out = SampleTrajectory {
        states: vec![current.iter().map(|&s| s as u32).collect()],
        actions: Vec::new(),
        rewards: Vec::new(),
        mean_fields: vec![g.mean_field.clone()],
        noises: vec![g.noise],
        observations: vec![env.observe(&g)],
        dones: Vec::new(),
    };
    let mut hidden = policy.initial_hidden();
    for t in 0..spec.horizon {
        let mut rng = keyed_rng(agent_seed, stream::AGENTS, t as u64);
        let done = t == 0;
        let (pi, h) = policy.policy_step(t, &out.observations[t], &hidden, done)?;
        check_policy(&pi, ns, spec.num_actions)?;
        hidden = h;
        let mut cache = StepCache::new(env, &g);
        let mut actions = Vec::with_capacity(num_agents);
        let mut rewards = Vec::with_capacity(num_agents);
        let mut next = Vec::with_capacity(num_agents);
        for &s in &current {
            let a = sample_categorical(&mut rng, pi.row(s).as_slice().expect("row-major"));
            let (row, r) = cache.get(s, a);
            if !r.is_finite() {
                return Err(numeric(format!("reward at s={s}, a={a}, t={t}")));
            }
            actions.push(a as u32);
            rewards.push(*r);
            next.push(sample_row(&mut rng, row));
        }
        current = next;
        let next_g = AggregateState {
            mean_field: MeanField::empirical(ns, &current),
            noise: env.noise().step_keyed(g.noise, scenario.noise_seed, t),
            time: t + 1,
            statics: g.statics.clone(),
        };
        g = next_g;
        out.actions.push(actions);
        out.rewards.push(rewards);
        out.dones.push(done);
        out.states.push(current.iter().map(|&s| s as u32).collect());
        out.mean_fields.push(g.mean_field.clone());
        out.noises.push(g.noise);
        out.observations.push(env.observe(&g));
    }
    // Terminal reward on the realized final states.
    let agg = env.aggregates(&g);
    if let Some(last) = out.rewards.last_mut() {
        for (r, &s) in last.iter_mut().zip(&current) {
            if let Some(rt) = env.terminal_reward(s, &g, &agg) {
                *r += spec.discount * rt;
            }
        }
    }
    Ok(out)
}

impl SampleTrajectory {
    /// Mean over agents of `Σ_t γ^t r_t`.
    pub fn mean_return(&self, gamma: f64) -> f64 {
        let n = self.states[0].len();
        let mut total = 0.0;
        let mut disc = 1.0;
        for row in &self.rewards {
            total += disc * row.iter().sum::<f64>();
            disc *= gamma;
        }
        total / n as f64
    }
}

pub mod io {
    //! Columnar binary trajectory files with a JSON sidecar.

    use std::fs;
    use std::path::Path;

    use ndarray::Array2;
    use serde::{Deserialize, Serialize};

    use super::AnalyticTrajectory;
    use crate::error::{CoreError, Result};
    use crate::types::{AggregateState, MeanField};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Column {
        pub name: String,
        pub shape: Vec<usize>,
        pub offset: usize,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Header {
        pub format: String,
        pub env_id: String,
        pub label: String,
        pub seed: u64,
        pub policy_hash: String,
        pub statics: Vec<f64>,
        pub columns: Vec<Column>,
    }

    const FORMAT: &str = "mfax-trajectory-v1";

    fn push(blob: &mut Vec<u8>, cols: &mut Vec<Column>, name: &str, shape: Vec<usize>, data: impl Iterator<Item = f64>) {
        let offset = blob.len();
        for x in data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        cols.push(Column {
            name: name.into(),
            shape,
            offset,
        });
    }

    /// Writes `path` (binary) and `path.json` (header).
    pub fn save(traj: &AnalyticTrajectory, path: &Path, policy_hash: &str) -> Result<()> {
        let t = traj.horizon();
        let ns = traj.states[0].mean_field.len();
        let na = traj.policies.first().map_or(0, |p| p.ncols());
        let od = traj.observations[0].len();
        let mut blob = Vec::new();
        let mut cols = Vec::new();
        push(&mut blob, &mut cols, "mean_field", vec![t + 1, ns],
            traj.states.iter().flat_map(|g| g.mean_field.probs().to_vec()));
        push(&mut blob, &mut cols, "noise", vec![t + 1], traj.states.iter().map(|g| g.noise));
        push(&mut blob, &mut cols, "observation", vec![t + 1, od],
            traj.observations.iter().flatten().copied());
        push(&mut blob, &mut cols, "policy", vec![t, ns, na],
            traj.policies.iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()));
        push(&mut blob, &mut cols, "reward", vec![t, ns, na],
            traj.rewards.iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
        let header = Header {
            format: FORMAT.into(),
            env_id: traj.env_id.clone(),
            label: traj.label.clone(),
            seed: traj.noise_seed,
            policy_hash: policy_hash.into(),
            statics: traj.states[0].statics.clone(),
            columns: cols,
        };
        fs::write(path, blob)?;
        fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(AnalyticTrajectory, Header)> {
        let blob = fs::read(path)?;
        let header: Header = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        if header.format != FORMAT {
            return Err(CoreError::Serde(format!("unknown format {}", header.format)));
        }
        let column = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let c = header
                .columns
                .iter()
                .find(|c| c.name == name)
                .ok_or_else(|| CoreError::Serde(format!("missing column {name}")))?;
            let n: usize = c.shape.iter().product();
            let bytes = blob
                .get(c.offset..c.offset + 8 * n)
                .ok_or_else(|| CoreError::Serde(format!("column {name} truncated")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            Ok((c.shape.clone(), data))
        };
        let (mshape, mdata) = column("mean_field")?;
        let (_, noise) = column("noise")?;
        let (oshape, odata) = column("observation")?;
        let (pshape, pdata) = column("policy")?;
        let (_, rdata) = column("reward")?;
        let (t1, ns) = (mshape[0], mshape[1]);
        let states = (0..t1)
            .map(|t| {
                Ok(AggregateState {
                    mean_field: MeanField::new(mdata[t * ns..(t + 1) * ns].to_vec())?,
                    noise: noise[t],
                    time: t,
                    statics: header.statics.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let od = oshape[1];
        let observations = (0..t1).map(|t| odata[t * od..(t + 1) * od].to_vec()).collect();
        let (t, na) = (pshape[0], pshape[2]);
        let mats = |data: &[f64]| -> Vec<Array2<f64>> {
            (0..t)
                .map(|k| {
                    Array2::from_shape_vec((ns, na), data[k * ns * na..(k + 1) * ns * na].to_vec())
                        .expect("shape from header")
                })
                .collect()
        };
        Ok((
            AnalyticTrajectory {
                env_id: header.env_id.clone(),
                label: header.label.clone(),
                noise_seed: header.seed,
                states,
                observations,
                policies: mats(&pdata),
                rewards: mats(&rdata),
            },
            header,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{LinearQuadratic, TabularEnv};
    use ndarray::array;

    fn flip_stay() -> TransitionTable {
        // action 0 stays, action 1 flips
        TransitionTable::from_rows(&[
            vec![vec![(0, 1.0)], vec![(1, 1.0)]],
            vec![vec![(1, 1.0)], vec![(0, 1.0)]],
        ])
    }

    #[test]
    fn symmetric_flip() {
        let pi = array![[0.5, 0.5], [0.5, 0.5]];
        let out = pushforward(&[1.0, 0.0], &pi, &flip_stay()).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn identity_dynamics_keep_mu() {
        let table = TransitionTable::from_rows(&[
            vec![vec![(0, 1.0)], vec![(0, 1.0)]],
            vec![vec![(1, 1.0)], vec![(1, 1.0)]],
            vec![vec![(2, 1.0)], vec![(2, 1.0)]],
        ]);
        let pi = array![[0.3, 0.7], [1.0, 0.0], [0.5, 0.5]];
        let mu = vec![0.2, 0.3, 0.5];
        let out = pushforward(&mu, &pi, &table).unwrap();
        assert!(out.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn bad_policy_rows_are_rejected() {
        let pi = array![[0.5, 0.4], [0.5, 0.5]];
        assert!(matches!(
            pushforward(&[1.0, 0.0], &pi, &flip_stay()),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn constant_values_are_preserved() {
        let pi = array![[0.2, 0.8], [0.9, 0.1]];
        let out = expected_next(&[3.0, 3.0], &pi, &flip_stay());
        assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-14));
    }

    #[test]
    fn deterministic_composition() {
        let pi = array![[0.0, 1.0], [1.0, 0.0]];
        // state 0 flips to 1, state 1 stays at 1
        assert_eq!(expected_next(&[10.0, 20.0], &pi, &flip_stay()), vec![20.0, 20.0]);
    }

    #[test]
    fn expected_reward_examples() {
        let r = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let one_hot = array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        assert_eq!(expected_reward(&one_hot, &r).unwrap(), vec![3.0, 4.0]);
        let uniform = Array2::from_elem((2, 3), 1.0 / 3.0);
        let e = expected_reward(&uniform, &r).unwrap();
        assert!((e[0] - 2.0).abs() < 1e-15 && (e[1] - 5.0).abs() < 1e-15);
        assert!(expected_reward(&Array2::zeros((3, 2)), &r).is_err());
    }

    #[test]
    fn horizon_one_shape() {
        let mut rng = keyed_rng(1, 0, 0);
        let env = TabularEnv::random(3, 2, 1, 2, &mut rng);
        let policy = FixedPolicy::uniform(3, 2);
        let traj = analytic_rollout(&env, &policy, &env.eval_scenarios(1, 0)[0]).unwrap();
        assert_eq!(traj.states.len(), 2);
        assert_eq!(traj.policies.len(), 1);
        assert_eq!(traj.rewards.len(), 1);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let env = LinearQuadratic::default();
        let policy = FixedPolicy::uniform(100, 7);
        let a = analytic_rollouts(&env, &policy, 9, 3).unwrap();
        let b = analytic_rollouts(&env, &policy, 9, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trajectory_file_round_trip() {
        let env = LinearQuadratic::default();
        let policy = FixedPolicy::uniform(100, 7);
        let traj = analytic_rollout(&env, &policy, &env.scenario(4, 0)).unwrap();
        let dir = std::env::temp_dir().join(format!("mfax-traj-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.bin");
        io::save(&traj, &path, "abc").unwrap();
        let (back, header) = io::load(&path).unwrap();
        assert_eq!(header.policy_hash, "abc");
        assert_eq!(back, traj);
        std::fs::remove_dir_all(&dir).ok();
    }
}
