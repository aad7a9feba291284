//! Mean-field game environments, the analytic mean-field engine, policy
//! networks and the trainers and evaluators built on them.

pub mod engine;
pub mod env;
pub mod envs;
pub mod eval;
pub mod hsm;
mod error;
pub mod noise;
pub mod policy;
pub mod rl;
pub mod types;

pub use engine::{
    analytic_rollout, analytic_rollouts, expected_next, expected_reward, pushforward,
    sample_rollout, AnalyticTrajectory, FixedPolicy, PolicyMatrix, RolloutPolicy,
    SampleTrajectory, TablePolicy, TransitionTable,
};
pub use env::{MeanFieldEnv, Scenario};
pub use error::{CoreError, Result};
pub use types::{AggregateState, EnvSpec, MeanField, NoiseSpec, StateInput};
