//! The reduced policy: an encoding of the individual state joined with a
//! shared encoding of the observation history, followed by an MLP trunk and
//! an action head.
//!
//! The recurrent core only ever sees observations and done flags, so its
//! hidden state is common to every individual state and one forward pass per
//! step yields the whole `|S| x |A|` policy matrix.

mod norm;

use std::path::Path;
use std::sync::Arc;

use mfax_autodiff::dist::{beta_entropy, beta_log_density_grid, BETA_EDGE};
use mfax_autodiff::layers::{Dense, Embedding, GruCell};
use mfax_autodiff::{Bound, DiffError, ParamStore, Tape, Tensor, Var};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use norm::RunningNorm;

use crate::engine::{PolicyMatrix, RolloutPolicy};
use crate::env::MeanFieldEnv;
use crate::error::{CoreError, Result};
use crate::types::StateInput;

/// How trunk outputs become action scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One free logit per action.
    Categorical,
    /// A Beta density over `[0, 1]` evaluated at the `K` bin midpoints.
    Ordinal,
    /// The ordinal parameterization, sampled continuously by agent-level
    /// learners.
    Beta,
}

impl HeadKind {
    pub fn is_beta(self) -> bool {
        matches!(self, HeadKind::Ordinal | HeadKind::Beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub state_width: usize,
    pub obs_width: usize,
    /// GRU hidden size; `0` gives the memoryless encoder.
    pub recurrent_hidden: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub head: HeadKind,
    /// Adds a scalar critic head on the shared trunk.
    pub value_head: bool,
    pub head_init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            state_width: 64,
            obs_width: 64,
            recurrent_hidden: 64,
            trunk_width: 128,
            trunk_depth: 3,
            head: HeadKind::Categorical,
            value_head: false,
            head_init_scale: 0.01,
        }
    }
}

impl PolicyConfig {
    pub fn memoryless(self) -> Self {
        Self {
            recurrent_hidden: 0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Argument(format!("policy: {m}")));
        if self.state_width == 0 || self.obs_width == 0 || self.trunk_width == 0 {
            return bad("layer widths must be positive");
        }
        if self.trunk_depth == 0 {
            return bad("trunk_depth must be at least 1");
        }
        if !(self.head_init_scale.is_finite() && self.head_init_scale >= 0.0) {
            return bad("head_init_scale must be finite and nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum StateEncoder {
    Embedding(Embedding),
    Features { dense: Dense, table: Arc<Tensor> },
}

#[derive(Debug, Clone)]
enum ObsEncoder {
    Recurrent { gru: GruCell, out: Dense },
    Memoryless(Dense),
}

#[derive(Debug, Clone)]
enum Head {
    Logits(Dense),
    Beta { params: Dense, support: Arc<[f64]> },
}

/// Tape outputs of one trunk/head pass over `n` rows.
pub struct HeadOut<'t> {
    /// `n x A` unnormalized scores; log-probabilities after `log_softmax`.
    pub logits: Var<'t>,
    /// `(α, β)` columns for Beta-family heads.
    pub beta: Option<(Var<'t>, Var<'t>)>,
    /// `n x 1` critic output.
    pub value: Option<Var<'t>>,
}

impl<'t> HeadOut<'t> {
    pub fn log_policy(&self) -> mfax_autodiff::Result<Var<'t>> {
        self.logits.log_softmax()
    }

    /// Beta entropy per row, for continuous sampling.
    pub fn beta_entropy(&self) -> Result<Option<Var<'t>>> {
        match self.beta {
            Some((a, b)) => Ok(Some(beta_entropy(a, b)?)),
            None => Ok(None),
        }
    }
}

/// Plain values of [`HeadOut`] for a set of state rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RowOutputs {
    /// Raw head output, `n x |A|`.
    pub logits: Tensor,
    pub log_probs: Tensor,
    /// Beta parameters per row for Beta heads.
    pub beta: Option<(Vec<f64>, Vec<f64>)>,
    pub value: Option<Vec<f64>>,
}

/// The state half of the first trunk layer, `E_s W₁ˢ`, shared across steps.
pub struct StateContext<'t> {
    pub pre: Var<'t>,
}

/// Attaches the layer name to a tape failure.
fn layer<T>(name: &str, r: std::result::Result<T, DiffError>) -> Result<T> {
    r.map_err(|e| match e {
        DiffError::NonFinite { op } => CoreError::Numeric {
            context: format!("layer {name} ({op})"),
        },
        other => other.into(),
    })
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub params: ParamStore,
    pub normalizer: RunningNorm,
    num_states: usize,
    num_actions: usize,
    obs_dim: usize,
    all_states: Arc<[usize]>,
    state: StateEncoder,
    obs: ObsEncoder,
    trunk: Vec<Dense>,
    head: Head,
    value: Option<Dense>,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        config: PolicyConfig,
        env: &dyn MeanFieldEnv,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let spec = env.spec();
        let (ns, na, od) = (spec.num_states, spec.num_actions, spec.obs_dim);
        let mut params = ParamStore::new();
        let state = match env.state_input() {
            StateInput::Index => {
                StateEncoder::Embedding(Embedding::new(&mut params, "state", ns, config.state_width, rng))
            }
            StateInput::Features(d) => {
                let table = env.state_features().ok_or_else(|| {
                    CoreError::Contract(format!("{} declares features but provides none", env.id()))
                })?;
                if table.dim() != (ns, d) {
                    return Err(CoreError::Contract(format!(
                        "state feature table is {:?}, expected ({ns}, {d})",
                        table.dim()
                    )));
                }
                StateEncoder::Features {
                    dense: Dense::new(&mut params, "state", d, config.state_width, rng),
                    table: Arc::new(table),
                }
            }
        };
        let obs = if config.recurrent_hidden > 0 {
            ObsEncoder::Recurrent {
                gru: GruCell::new(&mut params, "obs.gru", od, config.recurrent_hidden, rng),
                out: Dense::new(&mut params, "obs.out", config.recurrent_hidden, config.obs_width, rng),
            }
        } else {
            ObsEncoder::Memoryless(Dense::new(&mut params, "obs.out", od, config.obs_width, rng))
        };
        let mut trunk = Vec::with_capacity(config.trunk_depth);
        let mut fan_in = config.state_width + config.obs_width;
        for i in 0..config.trunk_depth {
            trunk.push(Dense::new(&mut params, &format!("trunk{i}"), fan_in, config.trunk_width, rng));
            fan_in = config.trunk_width;
        }
        let head = if config.head.is_beta() {
            let support = (0..na)
                .map(|k| ((k as f64 + 0.5) / na as f64).clamp(BETA_EDGE, 1.0 - BETA_EDGE))
                .collect();
            Head::Beta {
                params: Dense::new(&mut params, "head", fan_in, 2, rng),
                support,
            }
        } else {
            Head::Logits(Dense::new(&mut params, "head", fan_in, na, rng))
        };
        let head_dense = match &head {
            Head::Logits(d) | Head::Beta { params: d, .. } => *d,
        };
        params.get_mut(head_dense.w).mapv_inplace(|w| w * config.head_init_scale);
        let value = if config.value_head {
            let d = Dense::new(&mut params, "value", fan_in, 1, rng);
            params.get_mut(d.w).mapv_inplace(|w| w * config.head_init_scale);
            Some(d)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            normalizer: RunningNorm::new(od),
            num_states: ns,
            num_actions: na,
            obs_dim: od,
            all_states: (0..ns).collect(),
            state,
            obs,
            trunk,
            head,
            value,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn hidden_size(&self) -> usize {
        self.config.recurrent_hidden
    }

    pub fn is_recurrent(&self) -> bool {
        self.config.recurrent_hidden > 0
    }

    pub fn zero_hidden(&self) -> Vec<f64> {
        vec![0.0; self.config.recurrent_hidden]
    }

    /// State encodings, `n x state_width`; all states when `states` is `None`.
    pub fn state_code<'t>(&self, b: &Bound<'t>, tape: &'t Tape, states: Option<Arc<[usize]>>) -> Result<Var<'t>> {
        let idx = states.unwrap_or_else(|| Arc::clone(&self.all_states));
        match &self.state {
            StateEncoder::Embedding(e) => layer("state", e.forward(b, idx)),
            StateEncoder::Features { dense, table } => {
                let x = tape.constant_shared(Arc::clone(table));
                let x = if idx.len() == self.num_states && idx.iter().enumerate().all(|(i, &s)| i == s) {
                    x
                } else {
                    layer("state", x.gather_rows(idx))?
                };
                layer("state", dense.forward(b, x).and_then(|v| v.relu()))
            }
        }
    }

    /// Precomputes the state half of the first trunk layer.
    pub fn state_context<'t>(&self, b: &Bound<'t>, tape: &'t Tape, states: Option<Arc<[usize]>>) -> Result<StateContext<'t>> {
        let code = self.state_code(b, tape, states)?;
        let w = b.var(self.trunk[0].w);
        let ws = self.config.state_width;
        let pre = layer("trunk0", w.slice_rows(0, ws).and_then(|w| code.matmul(w)))?;
        Ok(StateContext { pre })
    }

    /// Normalized observation rows as a constant, `n x obs_dim`.
    pub fn obs_input<'t>(&self, tape: &'t Tape, rows: &[&[f64]]) -> Result<Var<'t>> {
        let mut x = Array2::zeros((rows.len(), self.obs_dim));
        for (i, o) in rows.iter().enumerate() {
            if o.len() != self.obs_dim {
                return Err(CoreError::Argument(format!(
                    "observation has {} entries, expected {}",
                    o.len(),
                    self.obs_dim
                )));
            }
            for (j, v) in self.normalizer.normalize(o).into_iter().enumerate() {
                x[[i, j]] = v;
            }
        }
        Ok(tape.constant(x))
    }

    /// One observation-encoder step: `(code, h')`. `h` is ignored (treated as
    /// zero) when `done`; memoryless encoders return `h` unchanged.
    pub fn obs_step<'t>(
        &self,
        b: &Bound<'t>,
        tape: &'t Tape,
        x: Var<'t>,
        h: Option<Var<'t>>,
        done: bool,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        match &self.obs {
            ObsEncoder::Memoryless(d) => Ok((layer("obs.out", d.forward(b, x))?, h)),
            ObsEncoder::Recurrent { gru, out } => {
                let rows = x.shape().0;
                let h = match h {
                    Some(h) if !done => h,
                    _ => tape.constant(Array2::zeros((rows, self.config.recurrent_hidden))),
                };
                let h_next = layer("obs.gru", gru.forward(b, x, h))?;
                let code = layer("obs.out", h_next.relu().and_then(|r| out.forward(b, r)))?;
                Ok((code, Some(h_next)))
            }
        }
    }

    /// Trunk and heads for `n` state rows against `1` or `n` observation codes.
    pub fn head<'t>(&self, b: &Bound<'t>, ctx: &StateContext<'t>, obs_code: Var<'t>) -> Result<HeadOut<'t>> {
        let ws = self.config.state_width;
        let first = self.trunk[0];
        let mut x = layer("trunk0", {
            b.var(first.w)
                .slice_rows(ws, ws + self.config.obs_width)
                .and_then(|w| obs_code.matmul(w))
                .and_then(|o| ctx.pre.add(o))
                .and_then(|v| v.add(b.var(first.b)))
                .and_then(|v| v.relu())
        })?;
        for (i, d) in self.trunk.iter().enumerate().skip(1) {
            x = layer(&format!("trunk{i}"), d.forward(b, x).and_then(|v| v.relu()))?;
        }
        let (logits, beta) = match &self.head {
            Head::Logits(d) => (layer("head", d.forward(b, x))?, None),
            Head::Beta { params, support } => {
                let raw = layer("head", params.forward(b, x))?;
                let alpha = layer("head", raw.select_cols(vec![0; raw.shape().0].into()))?;
                let beta = layer("head", raw.select_cols(vec![1; raw.shape().0].into()))?;
                let alpha = layer("head", alpha.softplus().and_then(|v| v.add_scalar(1.0)))?;
                let beta = layer("head", beta.softplus().and_then(|v| v.add_scalar(1.0)))?;
                (layer("head", beta_log_density_grid(support, alpha, beta))?, Some((alpha, beta)))
            }
        };
        let value = match &self.value {
            Some(d) => Some(layer("value", d.forward(b, x))?),
            None => None,
        };
        Ok(HeadOut { logits, beta, value })
    }

    /// `(Π, h')` on an existing tape; `Π` is `log Π` as a tape variable.
    pub fn log_policy_step<'t>(
        &self,
        b: &Bound<'t>,
        tape: &'t Tape,
        ctx: &StateContext<'t>,
        obs: &[f64],
        h: Option<Var<'t>>,
        done: bool,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let x = self.obs_input(tape, &[obs])?;
        let (code, h) = self.obs_step(b, tape, x, h, done)?;
        let out = self.head(b, ctx, code)?;
        Ok((layer("head", out.log_policy())?, h))
    }

    /// Plain evaluation of `(Π, h')` without gradient bookkeeping.
    pub fn policy_matrix(&self, obs: &[f64], hidden: &[f64], done: bool) -> Result<(PolicyMatrix, Vec<f64>)> {
        let (rows, h) = self.evaluate_rows(None, obs, hidden, done)?;
        Ok((rows.log_probs.mapv(f64::exp), h))
    }

    /// Frozen forward pass for the given state rows (all states when `None`)
    /// under one shared observation step.
    pub fn evaluate_rows(
        &self,
        states: Option<Arc<[usize]>>,
        obs: &[f64],
        hidden: &[f64],
        done: bool,
    ) -> Result<(RowOutputs, Vec<f64>)> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let ctx = self.state_context(&b, &tape, states)?;
        let h = if self.is_recurrent() {
            if hidden.len() != self.config.recurrent_hidden {
                return Err(CoreError::Argument(format!(
                    "hidden state has {} entries, expected {}",
                    hidden.len(),
                    self.config.recurrent_hidden
                )));
            }
            Some(tape.constant(Array2::from_shape_vec((1, hidden.len()), hidden.to_vec()).expect("1 x H")))
        } else {
            None
        };
        let x = self.obs_input(&tape, &[obs])?;
        let (code, h) = self.obs_step(&b, &tape, x, h, done)?;
        let out = self.head(&b, &ctx, code)?;
        let log_probs = layer("head", out.log_policy())?.value().as_ref().clone();
        let column = |v: Var<'_>| v.value().iter().copied().collect::<Vec<f64>>();
        let rows = RowOutputs {
            logits: out.logits.value().as_ref().clone(),
            log_probs,
            beta: out.beta.map(|(a, b)| (column(a), column(b))),
            value: out.value.map(column),
        };
        let h = h.map(|h| h.value().iter().copied().collect()).unwrap_or_default();
        Ok((rows, h))
    }

    /// SHA-256 of configuration, parameters and normalizer state.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).unwrap_or_default());
        for x in self.params.flatten() {
            h.update(x.to_le_bytes());
        }
        h.update(serde_json::to_vec(&self.normalizer).unwrap_or_default());
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "normalizer": self.normalizer,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "obs_dim": self.obs_dim,
        });
        Ok(self.params.save(path, meta)?)
    }

    /// Restores a checkpoint written by [`PolicyNet::save`] for `env`.
    pub fn load(path: &Path, env: &dyn MeanFieldEnv) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let config: PolicyConfig = serde_json::from_value(meta["config"].clone())?;
        let normalizer: RunningNorm = serde_json::from_value(meta["normalizer"].clone())?;
        let mut net = Self::new(config, env, &mut crate::noise::keyed_rng(0, 0, 0))?;
        if net.params.len() != params.len() {
            return Err(CoreError::Contract(format!(
                "checkpoint has {} tensors, the network for {} has {}",
                params.len(),
                env.id(),
                net.params.len()
            )));
        }
        for ((_, name, fresh), (_, lname, loaded)) in net.params.iter().zip(params.iter()) {
            if name != lname || fresh.dim() != loaded.dim() {
                return Err(CoreError::Contract(format!(
                    "checkpoint tensor {lname} {:?} does not match {name} {:?}",
                    loaded.dim(),
                    fresh.dim()
                )));
            }
        }
        net.params = params;
        net.normalizer = normalizer;
        Ok(net)
    }
}

impl RolloutPolicy for PolicyNet {
    fn initial_hidden(&self) -> Vec<f64> {
        self.zero_hidden()
    }

    fn policy_step(&self, _t: usize, obs: &[f64], hidden: &[f64], done: bool) -> Result<(PolicyMatrix, Vec<f64>)> {
        self.policy_matrix(obs, hidden, done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{LinearQuadratic, Macroeconomy};
    use crate::noise::keyed_rng;

    fn small() -> PolicyConfig {
        PolicyConfig {
            state_width: 8,
            obs_width: 8,
            recurrent_hidden: 6,
            trunk_width: 16,
            trunk_depth: 3,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn zero_head_gives_uniform_policy() {
        let env = LinearQuadratic::default();
        let mut net = PolicyNet::new(small(), &env, &mut keyed_rng(0, 0, 0)).unwrap();
        let Head::Logits(d) = net.head else { unreachable!() };
        net.params.get_mut(d.w).fill(0.0);
        let (pi, _) = net.policy_matrix(&[50.0], &net.zero_hidden(), true).unwrap();
        assert!(pi.iter().all(|p| (p - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn ordinal_head_is_normalized() {
        let env = Macroeconomy::reduced();
        let cfg = PolicyConfig {
            head: HeadKind::Ordinal,
            head_init_scale: 1.0,
            ..small()
        };
        let net = PolicyNet::new(cfg, &env, &mut keyed_rng(1, 0, 0)).unwrap();
        let (pi, h) = net.policy_matrix(&[0.04, 1.2], &net.zero_hidden(), true).unwrap();
        assert_eq!(pi.dim(), (250, 20));
        assert_eq!(h.len(), 6);
        for row in pi.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let env = LinearQuadratic::default();
        let mut net = PolicyNet::new(small(), &env, &mut keyed_rng(2, 0, 0)).unwrap();
        net.normalizer.update(&[40.0]);
        net.normalizer.update(&[60.0]);
        let dir = std::env::temp_dir().join(format!("mfax-policy-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.bin");
        net.save(&path).unwrap();
        let back = PolicyNet::load(&path, &env).unwrap();
        assert_eq!(back.hash(), net.hash());
        std::fs::remove_dir_all(&dir).ok();
    }
}
