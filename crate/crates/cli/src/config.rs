//! Experiment configuration: one JSON document layered over per-environment
//! defaults, with command-line overrides on top.

use std::fmt;
use std::path::{Path, PathBuf};

use mfax_core::hsm::HsmConfig;
use mfax_core::policy::{HeadKind, PolicyConfig};
use mfax_core::rl::{RlAlgo, RlConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A rejected configuration. Maps to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    /// Structural policy gradient with a memoryless policy.
    Spg,
    /// Structural policy gradient with a recurrent policy.
    Rspg,
    Ippo,
    Rippo,
    Momd,
}

impl Algo {
    pub fn rl(self) -> Option<RlAlgo> {
        match self {
            Algo::Spg | Algo::Rspg => None,
            Algo::Ippo => Some(RlAlgo::Ippo),
            Algo::Rippo => Some(RlAlgo::Rippo),
            Algo::Momd => Some(RlAlgo::Momd),
        }
    }

    pub fn recurrent(self) -> bool {
        matches!(self, Algo::Rspg | Algo::Rippo)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    /// Environment parameter overrides, e.g. `{"n_wealth": 50}`.
    pub env_overrides: Map<String, Value>,
    pub algo: Algo,
    pub seeds: Vec<u64>,
    /// Iterations between exploitability evaluations; 0 evaluates only at
    /// the start and the end.
    pub eval_every: usize,
    /// Sampled sequences (bar locations for Beach Bar) per evaluation.
    pub eval_sequences: usize,
    pub eval_seed: u64,
    /// Iterations between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub policy: PolicyConfig,
    /// Used by `spg` and `rspg`.
    pub hsm: HsmConfig,
    /// Used by `ippo`, `rippo` and `momd`.
    pub rl: RlConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for an environment and algorithm before user keys apply.
    pub fn defaults(env: &str, algo: Algo) -> Self {
        let num_envs = if env == "beach_bar" { 128 } else { 8 };
        let head = match (env, algo) {
            ("macro", Algo::Momd) => HeadKind::Categorical,
            ("macro", Algo::Ippo | Algo::Rippo) => HeadKind::Beta,
            ("macro", _) => HeadKind::Ordinal,
            _ => HeadKind::Categorical,
        };
        let mut policy = PolicyConfig {
            head,
            value_head: matches!(algo, Algo::Ippo | Algo::Rippo),
            ..PolicyConfig::default()
        };
        if !algo.recurrent() {
            policy = policy.memoryless();
        }
        Self {
            env: env.to_string(),
            env_overrides: Map::new(),
            algo,
            seeds: vec![0],
            eval_every: 10,
            eval_sequences: mfax_core::eval::default_sequence_count(env),
            eval_seed: 0,
            checkpoint_every: 0,
            policy,
            hsm: HsmConfig {
                iterations: if env == "macro" { 3000 } else { 2000 },
                num_envs,
                ..HsmConfig::default()
            },
            rl: RlConfig {
                num_envs,
                ..RlConfig::default()
            },
            output_dir: PathBuf::from("runs").join(format!("{env}_{algo}")),
        }
    }

    /// Layers `user` over the defaults for its `env` and `algo` keys and
    /// rejects unknown keys.
    pub fn from_value(user: Value) -> Result<Self, ConfigError> {
        let Value::Object(map) = &user else {
            return Err(bad("top level must be a JSON object"));
        };
        let env = match map.get("env") {
            None => "lq".to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(other) => return Err(bad(format!("env: expected a string, got {other}"))),
        };
        if !mfax_core::envs::ENV_IDS.contains(&env.as_str()) {
            return Err(bad(format!("env: unknown id {env:?}, expected one of {:?}", mfax_core::envs::ENV_IDS)));
        }
        let algo: Algo = match map.get("algo") {
            None => Algo::Rspg,
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| bad(format!("algo: {e}")))?,
        };
        let mut merged = serde_json::to_value(Self::defaults(&env, algo)).expect("serializable defaults");
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut user: Value = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        for (key, value) in overrides {
            set_path(&mut user, key, value.clone())?;
        }
        Self::from_value(user)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(bad("seeds: need at least one seed"));
        }
        if self.eval_sequences == 0 {
            return Err(bad("eval_sequences: must be positive"));
        }
        self.policy.validate().map_err(|e| bad(e.to_string()))?;
        mfax_core::envs::make(&self.env, self.env_overrides_value().as_ref()).map_err(|e| bad(format!("env_overrides: {e}")))?;
        match self.algo.rl() {
            None => {
                self.hsm.validate().map_err(|e| bad(e.to_string()))?;
                if self.algo.recurrent() != (self.policy.recurrent_hidden > 0) {
                    return Err(bad(format!(
                        "policy.recurrent_hidden: {} needs {} network",
                        self.algo,
                        if self.algo.recurrent() { "a recurrent" } else { "a memoryless" }
                    )));
                }
            }
            Some(algo) => {
                self.rl.validate().map_err(|e| bad(e.to_string()))?;
                if algo != RlAlgo::Rippo && self.policy.recurrent_hidden > 0 {
                    return Err(bad(format!("policy.recurrent_hidden: {} needs a memoryless network", self.algo)));
                }
                if algo != RlAlgo::Momd && !self.policy.value_head {
                    return Err(bad(format!("policy.value_head: {} needs a critic", self.algo)));
                }
                if algo == RlAlgo::Momd && self.policy.head != HeadKind::Categorical {
                    return Err(bad("policy.head: momd needs a categorical head"));
                }
            }
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        match self.algo.rl() {
            None => self.hsm.iterations,
            Some(_) => self.rl.iterations,
        }
    }

    pub fn env_overrides_value(&self) -> Option<Value> {
        (!self.env_overrides.is_empty()).then(|| Value::Object(self.env_overrides.clone()))
    }
}

/// Recursive object merge; non-object values in `top` replace `base`.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    // Overrides are a flat map of their own; replace wholesale.
                    Some(slot) if k != "env_overrides" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Sets `a.b.c` in a JSON object, creating intermediate objects.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(bad(format!("override key {path:?} has an empty segment")));
        }
        let Value::Object(map) = node else {
            return Err(bad(format!("override {path:?}: {} is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Parses `key=value`; the value is JSON when it parses as JSON, a string
/// otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| bad(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
