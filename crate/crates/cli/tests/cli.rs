//! End-to-end runs of the `mfax` binary.

use std::path::Path;
use std::process::{Command, Output};

use mfax_cli::run::{ResultRow, RESULTS_FILE};
use serde_json::{json, Value};

fn mfax(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfax")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn tiny_config(dir: &Path, algo: &str) -> std::path::PathBuf {
    let cfg = json!({
        "env": "lq",
        "algo": algo,
        "seeds": [3],
        "eval_every": 2,
        "checkpoint_every": 2,
        "policy": {"state_width": 4, "obs_width": 4, "trunk_width": 8, "trunk_depth": 1, "recurrent_hidden": if algo == "rspg" { 4 } else { 0 }},
        "hsm": {"iterations": 4, "num_envs": 2},
        "rl": {"iterations": 2, "num_envs": 2, "population": 200, "agents_per_env": 4, "updates_per_iteration": 2,
               "ppo": {"num_steps": 8, "num_minibatches": 2},
               "momd": {"batch_size": 16, "min_buffer_size": 16, "min_buffer_steps": 16, "learn_every": 2}},
        "output_dir": dir.join("out"),
    });
    let path = dir.join(format!("{algo}.json"));
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn read_rows(path: &Path) -> Vec<ResultRow> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "rspg");
    let out = mfax(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");

    let header = std::fs::read_to_string(dir.join(RESULTS_FILE)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "iteration,wall_clock_s,exploitability,mean_return,grad_norm,seed,algo,env");
    let rows = read_rows(&dir.join(RESULTS_FILE));
    assert_eq!(rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 2, 4]);
    assert!(rows.windows(2).all(|w| w[0].wall_clock_s <= w[1].wall_clock_s));
    assert!(rows.iter().all(|r| r.exploitability >= -1e-9 && r.seed == 3 && r.algo == "rspg" && r.env == "lq"));

    assert!(dir.join("checkpoint_seed3.bin").exists());
    assert!(dir.join("checkpoint_seed3_it2.bin").exists());
    assert!(!dir.join("FAILED").exists());
    let snapshot: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["hsm"]["iterations"], 4);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("plots/seed3/manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 6);
    for f in files {
        assert!(dir.join("plots/seed3").join(f["file"].as_str().unwrap()).exists());
    }

    // Same config and seed into a second directory: identical non-timing columns.
    let again = mfax(&["run", "--config", cfg.to_str().unwrap(), "--output", tmp.path().join("again").to_str().unwrap()]);
    assert!(again.status.success());
    let rerun = read_rows(&tmp.path().join("again").join(RESULTS_FILE));
    let strip = |rows: &[ResultRow]| rows.iter().map(|r| (r.iteration, r.exploitability, r.mean_return, r.grad_norm)).collect::<Vec<_>>();
    assert_eq!(strip(&rows), strip(&rerun));

    // Rows are appended, never rewritten.
    let third = mfax(&["run", "--config", cfg.to_str().unwrap(), "--seed", "4"]);
    assert!(third.status.success());
    let appended = read_rows(&dir.join(RESULTS_FILE));
    assert_eq!(&appended[..rows.len()], &rows[..]);
    assert_eq!(appended.len(), 2 * rows.len());

    let eval = mfax(&["eval", "--checkpoint", dir.join("checkpoint_seed3.bin").to_str().unwrap(), "--env", "lq", "--sequences", "2"]);
    assert!(eval.status.success());
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.contains("z=-1") && text.contains("z=1") && text.contains("exploitability"), "{text}");

    let plots = tmp.path().join("plots");
    let export = mfax(&[
        "export-plots",
        "--checkpoint",
        dir.join("checkpoint_seed3.bin").to_str().unwrap(),
        "--env",
        "lq",
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(export.status.success());
    assert!(plots.join("manifest.json").exists() && plots.join("mean_field_0.csv").exists());
}

#[test]
fn baselines_run_through_the_cli() {
    for algo in ["ippo", "momd"] {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path(), algo);
        let mut args = vec!["run", "--config", cfg.to_str().unwrap()];
        if algo == "ippo" {
            args.extend(["--set", "policy.value_head=true"]);
        }
        let out = mfax(&args);
        assert!(out.status.success(), "{algo}: {}", String::from_utf8_lossy(&out.stderr));
        let rows = read_rows(&tmp.path().join("out").join(RESULTS_FILE));
        assert_eq!(rows.last().unwrap().iteration, 2);
        assert!(rows.iter().all(|r| r.algo == algo));
    }
}

#[test]
fn config_errors_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, json!({"env": "lq", "hsm": {"learning_rate": 0.1}}).to_string()).unwrap();
    let out = mfax(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = mfax(&["run", "--config", path.to_str().unwrap(), "--set", "hsm.lr=-1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = mfax(&["bench", "--env", "moon"]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_mfax")).args(["bench", "--env", "lq"]).env("MFAX_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_reports_the_timing_protocol() {
    let out = Command::new(env!("CARGO_BIN_EXE_mfax"))
        .args(["bench", "--env", "lq", "--op", "pushforward", "--repeat", "90", "--warmup", "10", "--json"])
        .env("MFAX_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["repeat"], 90);
    assert_eq!(report["warmup"], 10);
    assert_eq!(report["threads"], 1);
    assert_eq!(report["timings_s"].as_array().unwrap().len(), 90);
}
