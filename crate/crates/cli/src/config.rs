//! On-disk run configuration and `--set key.path=value` overrides.

use std::path::{Path, PathBuf};

use medn_core::data_model::SynthConfig;
use medn_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const DATA_DIR_ENV: &str = "MEDN_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Default dataset location; falls back to `$MEDN_DATA_DIR`, then `./data`.
    pub data_dir: Option<PathBuf>,
    pub jobs: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: None,
            jobs: 1,
            synth: SynthConfig::default(),
            model: ModelConfig::compact(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
        };
        // Fill keys the file omits so that overrides can reach them.
        let mut base = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, value.take());
        let mut value = base;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// `a.b.c=value`; the value is parsed as JSON, or taken as a string if it is not JSON.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("{path}: {} is not an object", keys[..i].join(".")))
        })?;
        if i + 1 == keys.len() {
            if !obj.contains_key(*key) && !is_optional_slot(&keys[..i], key) {
                return Err(CliError::Config(format!("unknown config key {path}")));
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*key)
            .ok_or_else(|| CliError::Config(format!("unknown config key {path}")))?;
    }
    unreachable!("split always yields at least one key")
}

/// Optional fields serialize as `null` and are present, so nothing needs
/// special treatment today; kept as the single place to allow new ones.
fn is_optional_slot(_parents: &[&str], _key: &str) -> bool {
    false
}
