//! Experiment config files: JSON objects whose sections override per-environment defaults.
//!
//! ```json
//! { "train": { "epochs": 50, "warmup_epochs": 10 }, "fit": { "iterations": 200 } }
//! ```
//!
//! Missing keys keep their defaults; unknown keys are rejected.

use std::path::Path;

use risp::sim::EnvId;
use risp::tasks::{FitConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub fit: FitConfig,
}

impl ExperimentConfig {
    pub fn defaults(env: EnvId) -> Self {
        Self {
            train: TrainConfig::for_env(env),
            fit: FitConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults for `env`, overridden by the file when one is given.
pub fn load(path: Option<&Path>, env: EnvId) -> Result<ExperimentConfig, CliError> {
    let defaults = ExperimentConfig::defaults(env);
    let Some(path) = path else {
        return Ok(defaults);
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let over: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if !over.is_object() {
        return Err(CliError::Usage(format!(
            "{}: config must be a JSON object",
            path.display()
        )));
    }
    let mut merged = serde_json::to_value(&defaults).expect("serializable defaults");
    merge(&mut merged, over);
    serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// The fully resolved settings of a run, written next to its outputs.
pub fn resolved(command: &str, args: &impl Serialize, experiment: Option<&ExperimentConfig>) -> String {
    let mut v = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
    });
    if let Some(e) = experiment {
        v["experiment"] = serde_json::to_value(e).expect("serializable config");
    }
    let mut s = serde_json::to_string_pretty(&v).expect("serializable config");
    s.push('\n');
    s
}
