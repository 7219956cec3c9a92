//! Run configuration assembled from defaults, a flat dotted-key JSON file
//! (`{"train.lr": 0.02, "synth.style.noise_sigma": 0.1}`) and CLI overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::formats::write_json;
use crate::synth::DatasetConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: DatasetConfig::benchmark(0),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Writes `value` at a dotted path inside `root`, failing on keys the
/// defaults do not define.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("config key {key:?}: {part:?} is not a section")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::config(format!("config key {key:?} names a section, not a value")));
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::config("empty config key"))
}

fn flatten(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

impl RunConfig {
    /// Applies flat `key → value` overrides on top of `self`.
    pub fn with_overrides<'a>(&self, entries: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self> {
        let mut root = serde_json::to_value(self).map_err(|e| Error::config(e.to_string()))?;
        for (key, value) in entries {
            set_path(&mut root, key, value)?;
        }
        serde_json::from_value(root).map_err(|e| Error::config(format!("invalid config value: {e}")))
    }

    /// Parses a flat dotted-key JSON object over the defaults.
    pub fn from_flat_json(text: &str, origin: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        let Value::Object(map) = value else {
            return Err(Error::config(format!("{}: config must be a JSON object", origin.display())));
        };
        RunConfig::default().with_overrides(map.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_flat_json(&text, path)
    }

    /// Flat dotted-key form, sorted by key.
    pub fn to_flat(&self) -> Map<String, Value> {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = Map::new();
        flatten("", &value, &mut out);
        out
    }

    /// Echoes the effective configuration as `<dir>/config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("config.json"), &self.to_flat())
    }
}
