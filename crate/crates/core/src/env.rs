//! The environment contract.
//!
//! Implementors supply per-(state, action) dynamics and rewards given the
//! aggregate state; the engine turns them into whole-population updates.
//! Actions are passed as real values so that continuous-action samplers can
//! share the same dynamics; [`MeanFieldEnv::action_value`] maps a discrete
//! action index to its value.

use ndarray::Array2;
use rand::RngCore;

use crate::error::{numeric, CoreError, Result};
use crate::noise::{keyed_rng, stream, CommonNoise};
use crate::types::{AggregateState, EnvSpec, StateInput, TransitionRow};

/// An initial aggregate state together with the key of its noise stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub initial: AggregateState,
    pub noise_seed: u64,
    pub label: String,
}

pub trait MeanFieldEnv: Send + Sync {
    fn id(&self) -> &str;

    fn spec(&self) -> &EnvSpec;

    fn noise(&self) -> &CommonNoise;

    fn state_input(&self) -> StateInput {
        StateInput::Index
    }

    /// `|S| x d` feature table for [`StateInput::Features`] environments.
    fn state_features(&self) -> Option<Array2<f64>> {
        None
    }

    /// Real value of discrete action `a`.
    fn action_value(&self, a: usize) -> f64;

    /// Maps a draw `x ∈ [0, 1]` of a continuous head to an action value, for
    /// environments whose action set is an interval.
    fn continuous_action(&self, _x: f64) -> Option<f64> {
        None
    }

    /// Samples `(μ_0, z_0)` and any statics.
    fn reset(&self, rng: &mut dyn RngCore) -> AggregateState;

    /// Per-step summaries of the aggregate state reused across every
    /// `(s, a)` query (mean state, prices, …).
    fn aggregates(&self, g: &AggregateState) -> Vec<f64>;

    /// Noise-free image of `(s, action)` before idiosyncratic noise and
    /// clipping.
    fn deterministic_at(&self, s: usize, action: f64, g: &AggregateState, agg: &[f64]) -> f64;

    /// Writes the sparse next-state distribution into `out` (cleared first).
    fn transition_at(
        &self,
        s: usize,
        action: f64,
        g: &AggregateState,
        agg: &[f64],
        out: &mut TransitionRow,
    );

    fn reward_at(&self, s: usize, action: f64, g: &AggregateState, agg: &[f64]) -> f64;

    /// Reward collected in state `s` at the horizon, if the environment has one.
    fn terminal_reward(&self, _s: usize, _g: &AggregateState, _agg: &[f64]) -> Option<f64> {
        None
    }

    /// The shared observation `o_t = U(μ_t, z_t)`.
    fn observe(&self, g: &AggregateState) -> Vec<f64>;

    /// Scenarios used by exploitability evaluation. Finite noise is
    /// enumerated; continuous noise is sampled `count` times.
    fn eval_scenarios(&self, count: usize, seed: u64) -> Vec<Scenario>;

    /// The training scenario for environment `index` under `seed`.
    fn scenario(&self, seed: u64, index: usize) -> Scenario {
        let mut rng = keyed_rng(seed, stream::RESET, index as u64);
        let initial = self.reset(&mut rng);
        Scenario {
            initial,
            noise_seed: rng.next_u64(),
            label: format!("seed{seed}/env{index}"),
        }
    }

    fn check_indices(&self, s: usize, a: usize) -> Result<()> {
        let spec = self.spec();
        if s >= spec.num_states {
            return Err(CoreError::Argument(format!(
                "state {s} out of range for {} states",
                spec.num_states
            )));
        }
        if a >= spec.num_actions {
            return Err(CoreError::Argument(format!(
                "action {a} out of range for {} actions",
                spec.num_actions
            )));
        }
        Ok(())
    }

    fn deterministic_step(&self, s: usize, a: usize, g: &AggregateState) -> Result<f64> {
        self.check_indices(s, a)?;
        Ok(self.deterministic_at(s, self.action_value(a), g, &self.aggregates(g)))
    }

    fn reward(&self, s: usize, a: usize, g: &AggregateState) -> Result<f64> {
        self.check_indices(s, a)?;
        let r = self.reward_at(s, self.action_value(a), g, &self.aggregates(g));
        if r.is_finite() {
            Ok(r)
        } else {
            Err(numeric(format!("reward at s={s}, a={a}, t={}", g.time)))
        }
    }

    fn transition_support(&self, s: usize, a: usize, g: &AggregateState) -> Result<TransitionRow> {
        self.check_indices(s, a)?;
        let mut out = Vec::new();
        self.transition_at(s, self.action_value(a), g, &self.aggregates(g), &mut out);
        Ok(out)
    }
}

/// Adds `p` to the entry for `s` in `row`, appending if absent.
pub(crate) fn push_merged(row: &mut TransitionRow, s: usize, p: f64) {
    if p == 0.0 {
        return;
    }
    match row.iter_mut().find(|(t, _)| *t == s) {
        Some((_, q)) => *q += p,
        None => row.push((s, p)),
    }
}
