//! Command-line front end: experiment runs, checkpoint evaluation, the
//! mean-field update timing harness and plot-data export.

pub mod bench;
pub mod config;
pub mod plots;
pub mod run;

use std::path::Path;

use anyhow::Result;
use mfax_core::engine::RolloutPolicy;
use mfax_core::policy::PolicyNet;
use mfax_core::rl::SoftmaxQ;
use mfax_core::{CoreError, MeanFieldEnv};

pub use config::{Algo, ConfigError, ExperimentConfig};

/// Exit status for a failed command: 2 for configuration errors, 3 for
/// numeric failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(CoreError::Numeric { .. }) = cause.downcast_ref::<CoreError>() {
            return 3;
        }
    }
    1
}

/// A checkpoint restored for `env`.
pub fn load_checkpoint(path: &Path, env: &dyn MeanFieldEnv) -> Result<PolicyNet> {
    Ok(PolicyNet::load(path, env)?)
}

/// The policy a checkpoint is evaluated as: the network itself, or the
/// softmax of its Q-values at temperature `tau` for Q-learning checkpoints.
pub fn checkpoint_policy(net: &PolicyNet, tau: Option<f64>) -> Box<dyn RolloutPolicy + '_> {
    match tau {
        Some(tau) => Box::new(SoftmaxQ { net, tau, epsilon: 0.0 }),
        None => Box::new(net),
    }
}
