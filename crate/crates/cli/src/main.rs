use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mfax_cli::bench::{run_bench, BenchOp};
use mfax_cli::config::{parse_override, ConfigError, ExperimentConfig};
use mfax_cli::plots::export_plots;
use mfax_cli::run::run_experiment;
use mfax_cli::{checkpoint_policy, exit_code, load_checkpoint};
use mfax_core::eval::{eval_scenarios, exploitability};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "mfax", version, about = "Mean-field games with common noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EnvArgs {
    /// Environment id: lq, beach_bar or macro.
    #[arg(long)]
    env: String,
    /// Environment parameter overrides as a JSON object.
    #[arg(long)]
    env_overrides: Option<String>,
}

impl EnvArgs {
    fn build(&self) -> Result<std::sync::Arc<dyn mfax_core::MeanFieldEnv>> {
        let overrides: Option<Value> = match &self.env_overrides {
            Some(s) => Some(serde_json::from_str(s).map_err(|e| ConfigError(format!("env_overrides: {e}")))?),
            None => None,
        };
        mfax_core::envs::make(&self.env, overrides.as_ref()).map_err(|e| ConfigError(e.to_string()).into())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train per a JSON config and write results, checkpoints and plot data.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Config override as dotted.key=value; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Exploitability of a checkpoint with a per-sequence breakdown.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        env: EnvArgs,
        /// Sampled sequences (bar locations for beach_bar).
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate softmax(Q / tau), for Q-learning checkpoints.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Time one mean-field update.
    Bench {
        #[command(flatten)]
        env: EnvArgs,
        /// pushforward or sample.
        #[arg(long, default_value = "pushforward")]
        op: BenchOp,
        #[arg(long, default_value_t = 90)]
        repeat: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Population size for the sample op.
        #[arg(long, default_value_t = 10_000)]
        agents: usize,
        #[arg(long)]
        json: bool,
    },
    /// Write plot data for a checkpoint.
    ExportPlots {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tau: Option<f64>,
    },
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MFAX_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("MFAX_THREADS: expected a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Run {
            config,
            seed,
            output,
            overrides,
        } => {
            let mut pairs = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
            if let Some(seed) = seed {
                pairs.push(("seeds".into(), Value::from(vec![seed])));
            }
            if let Some(out) = output {
                pairs.push(("output_dir".into(), Value::from(out.to_string_lossy().into_owned())));
            }
            let cfg = ExperimentConfig::load(&config, &pairs)?;
            let rows = run_experiment(&cfg)?;
            if let Some(last) = rows.last() {
                println!(
                    "{} {}: final exploitability {:.6e} after {} iterations ({})",
                    cfg.env,
                    cfg.algo,
                    last.exploitability,
                    last.iteration,
                    cfg.output_dir.display()
                );
            }
        }
        Command::Eval {
            checkpoint,
            env,
            sequences,
            seed,
            tau,
            json,
        } => {
            let env = env.build()?;
            let net = load_checkpoint(&checkpoint, env.as_ref())?;
            let scenarios = eval_scenarios(env.as_ref(), sequences, seed);
            let report = exploitability(env.as_ref(), checkpoint_policy(&net, tau).as_ref(), &scenarios)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for s in &report.per_sequence {
                    println!("{:<16} J* {:>14.6e}  J {:>14.6e}  gap {:>12.6e}", s.label, s.best_response, s.value, s.gap());
                }
                println!(
                    "exploitability {:.6e}  mean return {:.6e}  sequences {}  ({:.2}s)",
                    report.exploitability, report.mean_return, report.num_sequences, report.wall_clock_s
                );
            }
        }
        Command::Bench {
            env,
            op,
            repeat,
            warmup,
            agents,
            json,
        } => {
            let env = env.build()?;
            let report = run_bench(env.as_ref(), op, repeat, warmup, agents)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "{} {:?}: {:.4e} s/update (min {:.4e}, max {:.4e}) over {} updates after {} warm-up, {} thread(s)",
                    report.env, report.op, report.mean_s, report.min_s, report.max_s, report.repeat, report.warmup, report.threads
                );
            }
        }
        Command::ExportPlots {
            checkpoint,
            env,
            out,
            sequences,
            seed,
            tau,
        } => {
            let env = env.build()?;
            let net = load_checkpoint(&checkpoint, env.as_ref())?;
            let scenarios = eval_scenarios(env.as_ref(), sequences, seed);
            let manifest = export_plots(env.as_ref(), checkpoint_policy(&net, tau).as_ref(), &scenarios, &out)?;
            println!("wrote {} files to {}", manifest.files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
