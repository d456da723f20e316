use std::path::{Path, PathBuf};
use std::sync::Arc;

use bsac_core::agent::TrainConfig;
use bsac_core::bsn::{parse_topology, preset, BsnGraph, PRESETS};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Everything needed to launch a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Environment steps between checkpoints.
    pub checkpoint_interval: u64,
    /// Metrics rows buffered before the file is flushed.
    pub metrics_flush_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/latest"),
            checkpoint_interval: 10_000,
            metrics_flush_interval: 10,
        }
    }
}

impl RunConfig {
    /// Defaults, shadowed by `file` (if any), shadowed by `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: Map<String, Value>) -> Result<Self, CliError> {
        let mut merged = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let layers = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let doc: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                match doc {
                    Value::Object(map) => vec![map, overrides],
                    _ => return Err(CliError::Config(format!("{}: expected a JSON object", path.display()))),
                }
            }
            None => vec![overrides],
        };
        let target = merged.as_object_mut().expect("config is an object");
        for layer in layers {
            for (k, v) in layer {
                match target.get_mut(&k) {
                    Some(slot) => *slot = v,
                    None => return Err(CliError::Config(format!("unknown config key {k:?}"))),
                }
            }
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.checkpoint_interval == 0 || self.metrics_flush_interval == 0 {
            return Err(CliError::Config("checkpoint_interval and metrics_flush_interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parses a `key=value` override. Values are read as JSON, falling back to a
/// bare string.
pub fn parse_override(text: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {text:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// A shipped preset by name, otherwise a topology document on disk.
pub fn resolve_topology(spec: &str, action_dim: usize) -> Result<Arc<BsnGraph>, CliError> {
    let graph = if PRESETS.contains(&spec) {
        preset(spec, action_dim).map_err(|e| CliError::Config(e.to_string()))?
    } else {
        let text = std::fs::read_to_string(spec).map_err(|e| CliError::Config(format!("topology {spec:?}: {e}")))?;
        let graph = parse_topology(&text).map_err(|e| CliError::Config(format!("topology {spec:?}: {e}")))?;
        graph.check_action_dim(action_dim).map_err(|e| CliError::Config(e.to_string()))?;
        graph
    };
    Ok(Arc::new(graph))
}
