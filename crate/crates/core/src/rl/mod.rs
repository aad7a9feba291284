//! Sample-based reinforcement-learning baselines: IPPO, recurrent IPPO and
//! M-OMD.
//!
//! Every iteration estimates one mean-field sequence per environment from a
//! finite population acting under the current policy, then trains on
//! individual agents stepping against that frozen sequence. Nothing here
//! evaluates population dynamics exactly; agents only ever see sampled
//! transitions and rewards.

pub mod buffer;
pub mod momd;
pub mod ppo;
pub mod sampler;

use std::sync::Arc;
use std::time::Instant;

use mfax_autodiff::optim::{Adam, AdamConfig};
use mfax_autodiff::ParamStore;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use buffer::{gae, RolloutBuffer, Segment};
pub use momd::{momd_target, ReplayBuffer, SoftmaxQ};
pub use ppo::{clipped_surrogate, ppo_loss, Batch};
pub use sampler::{sample_sequence, Behavior, Learners, NetActor, SampledSequence};

use crate::engine::RolloutPolicy;
use crate::env::MeanFieldEnv;
use crate::error::{numeric, CoreError, Result};
use crate::hsm::iteration_scenarios;
use crate::noise::{keyed_rng, stream};
use crate::policy::{HeadKind, PolicyNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlAlgo {
    Ippo,
    Rippo,
    Momd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub num_steps: usize,
    pub epochs: usize,
    pub num_minibatches: usize,
    pub gae_lambda: f64,
    pub clip: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            num_steps: 64,
            epochs: 1,
            num_minibatches: 8,
            gae_lambda: 0.95,
            clip: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.01,
            normalize_advantages: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomdConfig {
    pub tau: f64,
    pub alpha: f64,
    /// Environment steps between learner steps.
    pub learn_every: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub min_buffer_size: usize,
    /// Environment steps taken before the first learner step of a run.
    pub min_buffer_steps: usize,
    /// Learner steps between target refreshes.
    pub target_update: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training over which `ε` decays.
    pub epsilon_fraction: f64,
    pub reset_buffer: bool,
}

impl Default for MomdConfig {
    fn default() -> Self {
        Self {
            tau: 5.0,
            alpha: 0.95,
            learn_every: 8,
            buffer_capacity: 300_000,
            batch_size: 2048,
            min_buffer_size: 10_000,
            min_buffer_steps: 1000,
            target_update: 512,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_fraction: 0.5,
            reset_buffer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// Mean-field sequence regenerations.
    pub iterations: usize,
    pub num_envs: usize,
    /// Population size used to estimate each mean-field sequence.
    pub population: usize,
    /// Learning agents per environment.
    pub agents_per_env: usize,
    /// Policy updates (PPO) or learner steps (M-OMD) per sequence.
    pub updates_per_iteration: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub final_lr_fraction: f64,
    pub max_failures: usize,
    pub ppo: PpoConfig,
    pub momd: MomdConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            num_envs: 8,
            population: 10_000,
            agents_per_env: 128,
            updates_per_iteration: 100,
            lr: 1e-3,
            max_grad_norm: 1.0,
            final_lr_fraction: 0.1,
            max_failures: 3,
            ppo: PpoConfig::default(),
            momd: MomdConfig::default(),
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_envs", self.num_envs),
            ("population", self.population),
            ("agents_per_env", self.agents_per_env),
            ("updates_per_iteration", self.updates_per_iteration),
            ("max_failures", self.max_failures),
            ("ppo.num_steps", self.ppo.num_steps),
            ("ppo.epochs", self.ppo.epochs),
            ("ppo.num_minibatches", self.ppo.num_minibatches),
            ("momd.learn_every", self.momd.learn_every),
            ("momd.buffer_capacity", self.momd.buffer_capacity),
            ("momd.batch_size", self.momd.batch_size),
            ("momd.target_update", self.momd.target_update),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CoreError::Argument(format!("rl: {name} must be positive")));
        }
        let reals = [
            ("lr", self.lr),
            ("max_grad_norm", self.max_grad_norm),
            ("momd.tau", self.momd.tau),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(CoreError::Argument(format!("rl: {name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.ppo.gae_lambda) || !(0.0..1.0).contains(&self.ppo.clip) {
            return Err(CoreError::Argument("rl: gae_lambda and clip must lie in [0, 1)".into()));
        }
        if self.momd.min_buffer_size > self.momd.buffer_capacity {
            return Err(CoreError::Argument("rl: momd.min_buffer_size exceeds buffer_capacity".into()));
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

/// Checks that a network fits an algorithm.
pub fn check_network(algo: RlAlgo, net: &PolicyNet) -> Result<()> {
    match algo {
        RlAlgo::Ippo | RlAlgo::Rippo if !net.config.value_head => {
            Err(CoreError::Argument("ppo: the policy needs value_head = true".into()))
        }
        RlAlgo::Ippo if net.is_recurrent() => Err(CoreError::Argument(
            "ippo: use recurrent_hidden = 0 (rippo is the recurrent variant)".into(),
        )),
        RlAlgo::Momd if net.is_recurrent() => {
            Err(CoreError::Argument("momd: use recurrent_hidden = 0".into()))
        }
        RlAlgo::Momd if net.config.head != HeadKind::Categorical => {
            Err(CoreError::Argument("momd: Q-values need a categorical head".into()))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlReport {
    pub iteration: usize,
    /// Population mean return on this iteration's sampled sequences.
    pub mean_return: f64,
    pub loss: f64,
    /// Mean pre-clipping gradient norm over the iteration's optimizer steps.
    pub grad_norm: f64,
    pub wall_clock_s: f64,
    pub seed: u64,
}

pub struct RlTrainer {
    pub algo: RlAlgo,
    pub config: RlConfig,
    pub seed: u64,
    pub optimizer: Adam,
    pub iteration: usize,
    /// Optimizer steps taken so far.
    pub opt_steps: usize,
    env_steps: usize,
    target: Option<ParamStore>,
    replay: ReplayBuffer,
    failures: usize,
}

impl RlTrainer {
    pub fn new(algo: RlAlgo, config: RlConfig, net: &PolicyNet, seed: u64) -> Result<Self> {
        config.validate()?;
        check_network(algo, net)?;
        let momd = algo == RlAlgo::Momd;
        Ok(Self {
            algo,
            optimizer: Adam::new(config.adam(), &net.params),
            target: momd.then(|| net.params.clone()),
            replay: ReplayBuffer::new(if momd { config.momd.buffer_capacity } else { 1 }),
            config,
            seed,
            iteration: 0,
            opt_steps: 0,
            env_steps: 0,
            failures: 0,
        })
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// The policy whose exploitability is reported.
    pub fn eval_policy<'a>(&self, net: &'a PolicyNet) -> Box<dyn RolloutPolicy + 'a> {
        match self.algo {
            RlAlgo::Momd => Box::new(SoftmaxQ {
                net,
                tau: self.config.momd.tau,
                epsilon: 0.0,
            }),
            _ => Box::new(net),
        }
    }

    fn total_opt_steps(&self, sequences: bool) -> usize {
        let per_update = match self.algo {
            RlAlgo::Momd => 1,
            _ => ppo::minibatch_count(self.config.num_envs, &self.config.ppo, sequences),
        };
        self.config.iterations * self.config.updates_per_iteration * per_update
    }

    /// One mean-field iteration. A non-finite loss or reward abandons the
    /// iteration; more than `max_failures` in a row is an error.
    pub fn step(&mut self, net: &mut PolicyNet, env: &dyn MeanFieldEnv) -> Result<Option<RlReport>> {
        let it = self.iteration;
        self.iteration += 1;
        match self.run_iteration(net, env, it) {
            Ok(report) => {
                self.failures = 0;
                Ok(Some(report))
            }
            Err(CoreError::Numeric { context }) => {
                self.failures += 1;
                log::warn!("iteration {it}: non-finite {context}; iteration abandoned");
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

    fn sequences(&self, net: &PolicyNet, env: &dyn MeanFieldEnv, it: usize) -> Result<Vec<Arc<SampledSequence>>> {
        let e = self.config.num_envs;
        let scenarios = iteration_scenarios(env, self.seed, it, e);
        let tau = self.config.momd.tau;
        scenarios
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let agent_seed = keyed_rng(self.seed, stream::AGENTS, (it * e + i) as u64).next_u64();
                let seq = match self.algo {
                    RlAlgo::Momd => {
                        let b = SoftmaxQ { net, tau, epsilon: 0.0 };
                        sample_sequence(env, &b, s, self.config.population, agent_seed)
                    }
                    _ => sample_sequence(env, &NetActor::new(net, env), s, self.config.population, agent_seed),
                }?;
                Ok(Arc::new(seq))
            })
            .collect()
    }

    fn run_iteration(&mut self, net: &mut PolicyNet, env: &dyn MeanFieldEnv, it: usize) -> Result<RlReport> {
        let start = Instant::now();
        let seqs = self.sequences(net, env, it)?;
        for seq in &seqs {
            seq.observations.iter().for_each(|o| net.normalizer.update(o));
        }
        let mean_return = seqs.iter().map(|s| s.mean_return).sum::<f64>() / seqs.len() as f64;
        let e = self.config.num_envs;
        let mut learners: Vec<Learners> = seqs
            .iter()
            .enumerate()
            .map(|(i, seq)| {
                let rng = keyed_rng(self.seed, stream::LEARN, (it * e + i) as u64);
                Learners::new(Arc::clone(seq), self.config.agents_per_env, net.zero_hidden(), rng)
            })
            .collect();
        let mut rng = keyed_rng(self.seed, stream::LEARN ^ 0xFF, it as u64);
        let (loss, grad_norm) = match self.algo {
            RlAlgo::Ippo | RlAlgo::Rippo => self.ppo_iteration(net, env, &mut learners, &mut rng)?,
            RlAlgo::Momd => {
                let mut replay = std::mem::replace(&mut self.replay, ReplayBuffer::new(1));
                let out = self.momd_iteration(net, env, &mut learners, &mut rng, &mut replay);
                self.replay = replay;
                out?
            }
        };
        Ok(RlReport {
            iteration: it,
            mean_return,
            loss,
            grad_norm,
            wall_clock_s: start.elapsed().as_secs_f64(),
            seed: self.seed,
        })
    }

    fn ppo_iteration(
        &mut self,
        net: &mut PolicyNet,
        env: &dyn MeanFieldEnv,
        learners: &mut [Learners],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(f64, f64)> {
        let sequences = self.algo == RlAlgo::Rippo;
        let total = self.total_opt_steps(sequences);
        let (mut loss, mut norm, mut applied) = (0.0, 0.0, 0);
        for _ in 0..self.config.updates_per_iteration {
            let buffer = ppo::collect(env, net, learners, self.config.ppo.num_steps, &self.config.ppo)?;
            let stats = ppo::ppo_update(
                net,
                &mut self.optimizer,
                env,
                &buffer,
                &self.config.ppo,
                sequences,
                rng,
                &mut self.opt_steps,
                total,
            )?;
            loss += stats.loss * stats.applied as f64;
            norm += stats.grad_norm * stats.applied as f64;
            applied += stats.applied;
        }
        if applied == 0 {
            return Err(numeric("every PPO minibatch"));
        }
        Ok((loss / applied as f64, norm / applied as f64))
    }

    fn momd_iteration(
        &mut self,
        net: &mut PolicyNet,
        env: &dyn MeanFieldEnv,
        learners: &mut [Learners],
        rng: &mut rand_chacha::ChaCha8Rng,
        replay: &mut ReplayBuffer,
    ) -> Result<(f64, f64)> {
        let cfg = self.config.momd.clone();
        let gamma = env.spec().discount;
        let total = self.total_opt_steps(false);
        if cfg.reset_buffer {
            replay.clear();
        }
        let (mut loss, mut norm, mut done) = (0.0, 0.0, 0);
        let mut local_steps = 0usize;
        while done < self.config.updates_per_iteration {
            let progress = self.opt_steps as f64 / total as f64;
            let actor = SoftmaxQ {
                net,
                tau: cfg.tau,
                epsilon: momd::epsilon_at(progress, &cfg),
            };
            let records = learners
                .par_iter_mut()
                .map(|l| l.step(env, &actor))
                .collect::<Result<Vec<_>>>()?;
            for r in records {
                let obs: Arc<[f64]> = r.obs.into();
                let next_obs: Arc<[f64]> = r.next_obs.into();
                for i in 0..r.states.len() {
                    replay.push(momd::Transition {
                        state: r.states[i],
                        obs: Arc::clone(&obs),
                        action: r.draws[i].action as usize,
                        reward: r.rewards[i],
                        next_state: r.next_states[i],
                        next_obs: Arc::clone(&next_obs),
                        done: r.end,
                    });
                }
            }
            self.env_steps += 1;
            local_steps += 1;
            let ready = replay.len() >= cfg.min_buffer_size && self.env_steps >= cfg.min_buffer_steps;
            if ready && local_steps % cfg.learn_every == 0 {
                let idx = replay.sample(rng, cfg.batch_size);
                let target = self.target.as_ref().expect("momd trainer owns a target network");
                let (l, g) = momd::momd_update(net, target, &mut self.optimizer, replay, &idx, gamma, &cfg, self.opt_steps, total)?;
                self.opt_steps += 1;
                if self.opt_steps % cfg.target_update == 0 {
                    self.target = Some(net.params.clone());
                }
                loss += l;
                norm += g;
                done += 1;
            }
        }
        Ok((loss / done as f64, norm / done as f64))
    }
}
