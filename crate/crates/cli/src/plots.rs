//! Plot data as CSV matrices plus a JSON manifest. Rendering is left to
//! external tools.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mfax_core::engine::{analytic_rollout, RolloutPolicy};
use mfax_core::{MeanFieldEnv, Scenario};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotFile {
    pub file: String,
    pub kind: String,
    pub scenario: String,
    pub rows: usize,
    pub cols: usize,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub env: String,
    pub horizon: usize,
    pub num_states: usize,
    pub files: Vec<PlotFile>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn write_matrix(path: &Path, header: Option<&[String]>, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).with_context(|| format!("writing {}", path.display()))?;
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for row in rows {
        w.write_record(row.iter().map(|x| format!("{x:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// For each scenario: the mean-field heatmap (`T+1` rows by `|S|`), the
/// shared observation and common-noise series, and the policy's expected
/// action value per `(t, s)`.
pub fn export_plots(env: &dyn MeanFieldEnv, policy: &dyn RolloutPolicy, scenarios: &[Scenario], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let spec = env.spec();
    let mut files = Vec::new();
    for (i, scenario) in scenarios.iter().enumerate() {
        let traj = analytic_rollout(env, policy, scenario)?;
        let mut add = |kind: &str, description: &str, header: Option<Vec<String>>, rows: Vec<Vec<f64>>| -> Result<()> {
            let file = format!("{kind}_{i}.csv");
            write_matrix(&dir.join(&file), header.as_deref(), &rows)?;
            files.push(PlotFile {
                file,
                kind: kind.into(),
                scenario: scenario.label.clone(),
                rows: rows.len(),
                cols: rows.first().map_or(0, Vec::len),
                description: description.into(),
            });
            Ok(())
        };

        let heat: Vec<Vec<f64>> = traj.states.iter().map(|g| g.mean_field.probs().to_vec()).collect();
        add("mean_field", "mu_t(s); row t, column s", None, heat)?;

        let obs_dim = traj.observations.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string(), "z".to_string()];
        header.extend((0..obs_dim).map(|k| format!("o{k}")));
        let series = traj
            .states
            .iter()
            .zip(&traj.observations)
            .enumerate()
            .map(|(t, (g, o))| {
                let mut row = vec![t as f64, g.noise];
                row.extend(o);
                row
            })
            .collect();
        add("observations", "shared observation and common noise per step (prices for macro)", Some(header), series)?;

        let values: Vec<f64> = (0..spec.num_actions).map(|a| env.action_value(a)).collect();
        let table = traj
            .policies
            .iter()
            .map(|pi| pi.rows().into_iter().map(|row| row.iter().zip(&values).map(|(p, v)| p * v).sum()).collect())
            .collect();
        add("policy_mean_action", "expected action value per state; row t, column s", None, table)?;
    }
    let manifest = Manifest {
        env: env.id().to_string(),
        horizon: spec.horizon,
        num_states: spec.num_states,
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
