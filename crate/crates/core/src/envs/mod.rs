//! Concrete environments and the string-id registry.

mod beach_bar;
mod lq;
mod macroecon;
mod tabular;

use std::sync::Arc;

pub use beach_bar::{BeachBar, BeachBarParams};
pub use lq::{LinearQuadratic, LqParams};
pub use macroecon::{geometric_grid, lottery, MacroParams, Macroeconomy, CAPITAL_FLOOR};
pub use tabular::TabularEnv;

use crate::env::MeanFieldEnv;
use crate::error::{CoreError, Result};

pub const ENV_IDS: [&str; 3] = ["lq", "beach_bar", "macro"];

fn parse<T: serde::de::DeserializeOwned + Default>(
    id: &str,
    overrides: Option<&serde_json::Value>,
) -> Result<T> {
    match overrides {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| CoreError::Argument(format!("{id} parameters: {e}"))),
    }
}

/// Builds a registered environment, applying parameter overrides.
pub fn make(id: &str, overrides: Option<&serde_json::Value>) -> Result<Arc<dyn MeanFieldEnv>> {
    let env: Arc<dyn MeanFieldEnv> = match id {
        "lq" => Arc::new(LinearQuadratic::new(parse(id, overrides)?)),
        "beach_bar" => Arc::new(BeachBar::new(parse(id, overrides)?)),
        "macro" => Arc::new(Macroeconomy::new(parse(id, overrides)?)),
        other => {
            return Err(CoreError::Argument(format!(
                "unknown environment {other:?}; expected one of {ENV_IDS:?}"
            )))
        }
    };
    env.spec().validate()?;
    Ok(env)
}
