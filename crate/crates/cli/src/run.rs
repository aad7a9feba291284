//! Training runs with periodic exploitability evaluation and on-disk
//! artifacts.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mfax_core::engine::RolloutPolicy;
use mfax_core::eval::{eval_scenarios, exploitability, EvalReport};
use mfax_core::hsm::{prime_normalizer, HsmTrainer};
use mfax_core::noise::{keyed_rng, stream};
use mfax_core::policy::PolicyNet;
use mfax_core::rl::RlTrainer;
use mfax_core::MeanFieldEnv;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::plots::export_plots;

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub iteration: usize,
    pub wall_clock_s: f64,
    pub exploitability: f64,
    pub mean_return: f64,
    /// Empty for the evaluation before the first update.
    pub grad_norm: Option<f64>,
    pub seed: u64,
    pub algo: String,
    pub env: String,
}

pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURE_MARKER: &str = "FAILED";

/// Either trainer behind one stepping interface.
pub enum Trainer {
    Hsm(HsmTrainer),
    Rl(RlTrainer),
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, net: &mut PolicyNet, env: &dyn MeanFieldEnv, seed: u64) -> Result<Self> {
        Ok(match cfg.algo.rl() {
            None => {
                // Prime up front so the iteration-0 evaluation sees the same
                // input scaling as training.
                if net.normalizer.count == 0.0 {
                    prime_normalizer(net, env, seed, cfg.hsm.num_envs)?;
                }
                Trainer::Hsm(HsmTrainer::new(cfg.hsm.clone(), net, seed)?)
            }
            Some(algo) => Trainer::Rl(RlTrainer::new(algo, cfg.rl.clone(), net, seed)?),
        })
    }

    pub fn done(&self) -> bool {
        match self {
            Trainer::Hsm(t) => t.done(),
            Trainer::Rl(t) => t.done(),
        }
    }

    /// Iterations attempted so far.
    pub fn iteration(&self) -> usize {
        match self {
            Trainer::Hsm(t) => t.iteration,
            Trainer::Rl(t) => t.iteration,
        }
    }

    /// One iteration; the gradient norm when an update was applied.
    pub fn step(&mut self, net: &mut PolicyNet, env: &dyn MeanFieldEnv) -> Result<Option<f64>> {
        Ok(match self {
            Trainer::Hsm(t) => t.step(net, env)?.map(|r| r.grad_norm),
            Trainer::Rl(t) => t.step(net, env)?.map(|r| r.grad_norm),
        })
    }

    pub fn eval_policy<'a>(&self, net: &'a PolicyNet) -> Box<dyn RolloutPolicy + 'a> {
        match self {
            Trainer::Hsm(_) => Box::new(net),
            Trainer::Rl(t) => t.eval_policy(net),
        }
    }
}

pub fn init_net(cfg: &ExperimentConfig, env: &dyn MeanFieldEnv, seed: u64) -> Result<PolicyNet> {
    Ok(PolicyNet::new(cfg.policy.clone(), env, &mut keyed_rng(seed, stream::INIT, 0))?)
}

/// Trains one seed. `on_row` sees every evaluation row as it is produced and
/// `on_checkpoint` every intermediate checkpoint.
pub fn train_seed<F, C>(
    cfg: &ExperimentConfig,
    env: &dyn MeanFieldEnv,
    seed: u64,
    mut on_row: F,
    mut on_checkpoint: C,
) -> Result<(PolicyNet, Vec<ResultRow>)>
where
    F: FnMut(&ResultRow) -> Result<()>,
    C: FnMut(usize, &PolicyNet) -> Result<()>,
{
    let start = Instant::now();
    let mut net = init_net(cfg, env, seed)?;
    let mut trainer = Trainer::new(cfg, &mut net, env, seed)?;
    let scenarios = eval_scenarios(env, Some(cfg.eval_sequences), cfg.eval_seed);
    let mut rows = Vec::new();
    let mut emit = |iteration: usize, grad_norm: Option<f64>, report: &EvalReport| -> Result<()> {
        let row = ResultRow {
            iteration,
            wall_clock_s: start.elapsed().as_secs_f64(),
            exploitability: report.exploitability,
            mean_return: report.mean_return,
            grad_norm,
            seed,
            algo: cfg.algo.to_string(),
            env: cfg.env.clone(),
        };
        on_row(&row)?;
        rows.push(row);
        Ok(())
    };
    let report = exploitability(env, trainer.eval_policy(&net).as_ref(), &scenarios)?;
    emit(0, None, &report)?;
    let mut last_grad = None;
    while !trainer.done() {
        if let Some(g) = trainer.step(&mut net, env)? {
            last_grad = Some(g);
        }
        let it = trainer.iteration();
        if cfg.eval_every > 0 && it % cfg.eval_every == 0 || trainer.done() {
            let report = exploitability(env, trainer.eval_policy(&net).as_ref(), &scenarios)?;
            emit(it, last_grad, &report)?;
        }
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && !trainer.done() {
            on_checkpoint(it, &net)?;
        }
    }
    Ok((net, rows))
}

/// Appending CSV writer; the header is written only for a new file.
pub struct ResultsWriter {
    inner: csv::Writer<fs::File>,
}

impl ResultsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        let inner = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, seed: u64, iteration: Option<usize>) -> PathBuf {
    match iteration {
        Some(it) => dir.join(format!("checkpoint_seed{seed}_it{it}.bin")),
        None => dir.join(format!("checkpoint_seed{seed}.bin")),
    }
}

/// Runs every seed of `cfg`, writing results, checkpoints, the config
/// snapshot and plot data under `cfg.output_dir`. On failure the partial
/// artifacts stay and a marker file records the error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let env = mfax_core::envs::make(&cfg.env, cfg.env_overrides_value().as_ref())?;
    let mut writer = ResultsWriter::open(&dir.join(RESULTS_FILE))?;
    let mut all = Vec::new();
    for &seed in &cfg.seeds {
        log::info!("{} {} seed {seed}: {} iterations", cfg.env, cfg.algo, cfg.iterations());
        let outcome = train_seed(
            cfg,
            env.as_ref(),
            seed,
            |row| {
                log::info!(
                    "it {} expl {:.6} return {:.6} t {:.1}s",
                    row.iteration,
                    row.exploitability,
                    row.mean_return,
                    row.wall_clock_s
                );
                writer.write(row)
            },
            |it, net| Ok(net.save(&checkpoint_path(dir, seed, Some(it)))?),
        );
        let (net, rows) = match outcome {
            Ok(x) => x,
            Err(e) => {
                let marker = format!("seed {seed}: {e:#}\n");
                if let Err(w) = fs::write(dir.join(FAILURE_MARKER), marker) {
                    log::error!("could not write failure marker: {w}");
                }
                return Err(e);
            }
        };
        net.save(&checkpoint_path(dir, seed, None))?;
        let policy: Box<dyn RolloutPolicy + '_> = match cfg.algo.rl() {
            Some(algo) => RlTrainer::new(algo, cfg.rl.clone(), &net, seed)?.eval_policy(&net),
            None => Box::new(&net),
        };
        let scenarios = eval_scenarios(env.as_ref(), Some(cfg.eval_sequences), cfg.eval_seed);
        export_plots(env.as_ref(), policy.as_ref(), &scenarios, &dir.join("plots").join(format!("seed{seed}")))?;
        all.extend(rows);
    }
    Ok(all)
}
