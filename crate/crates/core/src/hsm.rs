//! Hybrid structural policy gradient.
//!
//! Each iteration rolls the reduced policy forward through the exact
//! mean-field update on `E` sampled common-noise sequences, then computes the
//! expected return backwards in time:
//!
//! ```text
//! v_T = 0
//! v_t = (Π_t ⊙ R_t)·1 + γ · expected_next(v_{t+1}, Π_t)
//! J   = mean_e μ₀ · v₀
//! ```
//!
//! Mean fields, observations, reward matrices and transition tables enter as
//! constants; gradients flow only through the policy matrices and the
//! `expected_next` contraction. The same policy parameters drive every
//! environment, so the memoryless variant is the same code with a
//! feed-forward observation encoder.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use mfax_autodiff::optim::{Adam, AdamConfig};
use mfax_autodiff::params::accumulate;
use mfax_autodiff::{Bound, Tape, Tensor, Var};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{analytic_rollout_with, expected_next_var, AnalyticTrajectory, TransitionTable};
use crate::env::{MeanFieldEnv, Scenario};
use crate::error::{numeric, CoreError, Result};
use crate::noise::{keyed_rng, stream};
use crate::policy::PolicyNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsmConfig {
    pub iterations: usize,
    /// Parallel environments `E` per iteration.
    pub num_envs: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Learning rate at the last iteration as a fraction of `lr`.
    pub final_lr_fraction: f64,
    /// Consecutive non-finite objectives tolerated before giving up.
    pub max_failures: usize,
}

impl Default for HsmConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            num_envs: 8,
            lr: 1e-3,
            max_grad_norm: 1.0,
            final_lr_fraction: 0.1,
            max_failures: 3,
        }
    }
}

impl HsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_envs == 0 {
            return Err(CoreError::Argument("hsm: num_envs must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::Argument("hsm: lr must be positive".into()));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return Err(CoreError::Argument("hsm: max_grad_norm must be positive".into()));
        }
        if self.max_failures == 0 {
            return Err(CoreError::Argument("hsm: max_failures must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            max_grad_norm: Some(self.max_grad_norm),
            final_lr_fraction: self.final_lr_fraction,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HsmReport {
    pub iteration: usize,
    /// Mean of `μ₀ · v₀` over the batch.
    pub objective: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_clock_s: f64,
    pub seed: u64,
}

/// Where the forward quantities of [`env_objective`] come from.
pub enum Source<'a> {
    /// Roll out the current policy from a scenario.
    Live(&'a Scenario),
    /// Replay a stored trajectory: mean fields, observations and rewards are
    /// taken as given and only the policy is recomputed.
    Frozen(&'a AnalyticTrajectory),
}

/// `J = μ₀ · v₀` for one environment as a `1 x 1` tape variable, together
/// with the forward trajectory.
pub fn env_objective<'t>(
    net: &PolicyNet,
    b: &Bound<'t>,
    tape: &'t Tape,
    env: &dyn MeanFieldEnv,
    source: Source<'_>,
) -> Result<(Var<'t>, AnalyticTrajectory)> {
    let ctx = net.state_context(b, tape, None)?;
    let mut log_pis: Vec<Var<'t>> = Vec::new();
    let mut hidden: Option<Var<'t>> = None;
    let mut step = |obs: &[f64], done: bool| -> Result<Var<'t>> {
        let (logp, h) = net.log_policy_step(b, tape, &ctx, obs, hidden, done)?;
        hidden = h;
        Ok(logp)
    };
    let (traj, tables): (AnalyticTrajectory, Vec<Arc<TransitionTable>>) = match source {
        Source::Live(scenario) => analytic_rollout_with(env, scenario, true, |_, obs, done| {
            let logp = step(obs, done)?;
            log_pis.push(logp);
            Ok(logp.value().mapv(f64::exp))
        })?,
        Source::Frozen(traj) => {
            for t in 0..traj.horizon() {
                log_pis.push(step(&traj.observations[t], t == 0)?);
            }
            (traj.clone(), traj.transition_tables(env))
        }
    };
    let j = backward_objective(tape, env.spec().discount, &traj, &tables, &log_pis)?;
    Ok((j, traj))
}

/// The backward recursion over given `log Π_t` tape variables.
pub fn backward_objective<'t>(
    tape: &'t Tape,
    gamma: f64,
    traj: &AnalyticTrajectory,
    tables: &[Arc<TransitionTable>],
    log_pis: &[Var<'t>],
) -> Result<Var<'t>> {
    let horizon = traj.horizon();
    if log_pis.len() != horizon || tables.len() != horizon {
        return Err(CoreError::Argument(format!(
            "backward pass needs {horizon} policies and tables, got {} and {}",
            log_pis.len(),
            tables.len()
        )));
    }
    let mut v: Option<Var<'t>> = None;
    for t in (0..horizon).rev() {
        let pi = log_pis[t].exp()?;
        let r = tape.constant(traj.rewards[t].clone());
        let mut vt = pi.mul(r)?.sum_cols()?;
        if let Some(next) = v {
            let cont = expected_next_var(pi, next, Arc::clone(&tables[t]))?;
            vt = vt.add(cont.scale(gamma)?)?;
        }
        v = Some(vt);
    }
    let mu0 = traj.mean_field(0).probs();
    let mu0 = tape.constant(Tensor::from_shape_vec((1, mu0.len()), mu0.to_vec()).expect("1 x S"));
    match v {
        Some(v0) => Ok(mu0.matmul(v0)?),
        None => Ok(tape.scalar(0.0)),
    }
}

/// Per-environment result of [`objective_and_grads`].
pub struct EnvGradient {
    pub objective: f64,
    /// `∂J/∂θ` in parameter-store order.
    pub grads: Vec<Tensor>,
    pub trajectory: AnalyticTrajectory,
}

/// `J` and `∂J/∂θ` for one source.
pub fn objective_and_grad(net: &PolicyNet, env: &dyn MeanFieldEnv, source: Source<'_>) -> Result<EnvGradient> {
    let tape = Tape::new();
    let b = net.params.bind(&tape);
    let (j, trajectory) = env_objective(net, &b, &tape, env, source)?;
    let objective = j.item();
    if !objective.is_finite() {
        return Err(numeric(format!("objective on {}", trajectory.label)));
    }
    let g = tape.backward(j)?;
    Ok(EnvGradient {
        objective,
        grads: b.grads(&g),
        trajectory,
    })
}

/// Training scenarios for one iteration: fresh `(μ₀, z)` draws per iteration.
pub fn iteration_scenarios(env: &dyn MeanFieldEnv, seed: u64, iteration: usize, count: usize) -> Vec<Scenario> {
    let key = keyed_rng(seed, stream::RESET, iteration as u64).next_u64();
    (0..count).map(|i| env.scenario(key, i)).collect()
}

/// Mean objective and summed-then-averaged gradient over the scenarios, in
/// scenario order.
pub fn batch_objective(
    net: &PolicyNet,
    env: &dyn MeanFieldEnv,
    scenarios: &[Scenario],
) -> Result<(f64, Vec<Tensor>, Vec<AnalyticTrajectory>)> {
    let results: Vec<EnvGradient> = scenarios
        .par_iter()
        .map(|s| objective_and_grad(net, env, Source::Live(s)))
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut grads = net.params.zeros_like();
    let mut total = 0.0;
    let mut trajs = Vec::with_capacity(results.len());
    for r in results {
        total += r.objective;
        accumulate(&mut grads, &r.grads);
        trajs.push(r.trajectory);
    }
    grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x / n));
    Ok((total / n, grads, trajs))
}

/// Seeds the observation normalizer from rollouts of the current policy.
pub fn prime_normalizer(net: &mut PolicyNet, env: &dyn MeanFieldEnv, seed: u64, count: usize) -> Result<()> {
    let scenarios = iteration_scenarios(env, seed ^ 0x9E37_79B9_7F4A_7C15, 0, count);
    let trajs: Vec<AnalyticTrajectory> = scenarios
        .par_iter()
        .map(|s| crate::engine::analytic_rollout(env, &*net, s))
        .collect::<Result<_>>()?;
    for traj in &trajs {
        traj.observations.iter().for_each(|o| net.normalizer.update(o));
    }
    Ok(())
}

/// One ascent step on `J`. The normalizer is updated from the iteration's
/// observations after the parameter step.
pub fn hsm_iteration(
    net: &mut PolicyNet,
    opt: &mut Adam,
    env: &dyn MeanFieldEnv,
    config: &HsmConfig,
    seed: u64,
    iteration: usize,
) -> Result<HsmReport> {
    let start = Instant::now();
    let scenarios = iteration_scenarios(env, seed, iteration, config.num_envs);
    let (objective, grads, trajs) = batch_objective(net, env, &scenarios)?;
    let ascent: Vec<Tensor> = grads.into_iter().map(|g| -g).collect();
    let info = opt.step(&mut net.params, &ascent, iteration, config.iterations);
    for traj in &trajs {
        traj.observations.iter().for_each(|o| net.normalizer.update(o));
    }
    Ok(HsmReport {
        iteration,
        objective,
        grad_norm: info.grad_norm,
        wall_clock_s: start.elapsed().as_secs_f64(),
        seed,
    })
}

/// Training loop state, reusable across calls to [`HsmTrainer::step`].
pub struct HsmTrainer {
    pub config: HsmConfig,
    pub seed: u64,
    pub optimizer: Adam,
    pub iteration: usize,
    failures: usize,
    /// Directory for diagnostic dumps on non-finite objectives.
    pub dump_dir: Option<PathBuf>,
}

impl HsmTrainer {
    pub fn new(config: HsmConfig, net: &PolicyNet, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Adam::new(config.adam(), &net.params),
            config,
            seed,
            iteration: 0,
            failures: 0,
            dump_dir: None,
        })
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Runs one iteration. A non-finite objective skips the update; more than
    /// `max_failures` in a row is an error.
    pub fn step(&mut self, net: &mut PolicyNet, env: &dyn MeanFieldEnv) -> Result<Option<HsmReport>> {
        if self.iteration == 0 && net.normalizer.count == 0.0 {
            prime_normalizer(net, env, self.seed, self.config.num_envs)?;
        }
        let it = self.iteration;
        self.iteration += 1;
        match hsm_iteration(net, &mut self.optimizer, env, &self.config, self.seed, it) {
            Ok(report) => {
                self.failures = 0;
                Ok(Some(report))
            }
            Err(CoreError::Numeric { context }) => {
                self.failures += 1;
                log::warn!("iteration {it}: non-finite {context}; update skipped");
                self.dump(it, &context, env);
                if self.failures >= self.config.max_failures {
                    return Err(numeric(format!(
                        "{} consecutive non-finite iterations, last: {context}",
                        self.failures
                    )));
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn dump(&self, iteration: usize, context: &str, env: &dyn MeanFieldEnv) {
        let Some(dir) = &self.dump_dir else { return };
        let labels: Vec<String> = iteration_scenarios(env, self.seed, iteration, self.config.num_envs)
            .into_iter()
            .map(|s| format!("{} noise_seed={}", s.label, s.noise_seed))
            .collect();
        let body = serde_json::json!({
            "iteration": iteration,
            "error": context,
            "env": env.id(),
            "scenarios": labels,
        });
        let path = dir.join(format!("nonfinite_{iteration}.json"));
        if let Err(e) = std::fs::write(&path, body.to_string()) {
            log::warn!("could not write {}: {e}", path.display());
        }
    }
}

/// Runs the whole budget, calling `on_report` after every successful
/// iteration.
pub fn train<F>(net: &mut PolicyNet, env: &dyn MeanFieldEnv, config: &HsmConfig, seed: u64, mut on_report: F) -> Result<Vec<HsmReport>>
where
    F: FnMut(&HsmReport, &PolicyNet) -> Result<()>,
{
    let mut trainer = HsmTrainer::new(config.clone(), net, seed)?;
    let mut reports = Vec::with_capacity(config.iterations);
    while !trainer.done() {
        if let Some(r) = trainer.step(net, env)? {
            on_report(&r, net)?;
            reports.push(r);
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TabularEnv;
    use crate::policy::PolicyConfig;

    fn tiny() -> (TabularEnv, PolicyNet) {
        let mut rng = keyed_rng(3, 0, 0);
        let env = TabularEnv::random(3, 2, 3, 2, &mut rng);
        let cfg = PolicyConfig {
            state_width: 4,
            obs_width: 4,
            recurrent_hidden: 4,
            trunk_width: 8,
            head_init_scale: 1.0,
            ..PolicyConfig::default()
        };
        let net = PolicyNet::new(cfg, &env, &mut rng).unwrap();
        (env, net)
    }

    #[test]
    fn live_and_frozen_objectives_agree() {
        let (env, net) = tiny();
        let s = env.scenario(0, 0);
        let live = objective_and_grad(&net, &env, Source::Live(&s)).unwrap();
        let frozen = objective_and_grad(&net, &env, Source::Frozen(&live.trajectory)).unwrap();
        assert_eq!(live.objective, frozen.objective);
        assert_eq!(live.grads, frozen.grads);
    }

    #[test]
    fn objective_matches_forward_return() {
        let (env, net) = tiny();
        let s = env.scenario(0, 0);
        let r = objective_and_grad(&net, &env, Source::Live(&s)).unwrap();
        let fwd = r.trajectory.discounted_return(1.0).unwrap();
        assert!((r.objective - fwd).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_leave_params() {
        let (env, mut net) = tiny();
        let before = net.params.flatten();
        let cfg = HsmConfig {
            iterations: 0,
            ..HsmConfig::default()
        };
        let reports = train(&mut net, &env, &cfg, 1, |_, _| Ok(())).unwrap();
        assert!(reports.is_empty());
        assert_eq!(net.params.flatten(), before);
    }

    #[test]
    fn same_seed_same_update() {
        let (env, net) = tiny();
        let cfg = HsmConfig {
            iterations: 2,
            num_envs: 2,
            ..HsmConfig::default()
        };
        let run = |mut n: PolicyNet| {
            train(&mut n, &env, &cfg, 5, |_, _| Ok(())).unwrap();
            n.params.flatten()
        };
        assert_eq!(run(net.clone()), run(net));
    }
}
