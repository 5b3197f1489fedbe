//! Training settings resolved as CLI flag > config file > default.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use scope_core::model::ModelConfig;
use scope_core::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// Overlays `file` and then `flags` onto `defaults`. Objects merge key by
/// key; anything else replaces.
pub fn resolve(defaults: RunConfig, file: Option<&Path>, flags: Value) -> Result<RunConfig> {
    let mut value = serde_json::to_value(&defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overlay: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if !overlay.is_object() {
            bail!("{}: expected a JSON object", path.display());
        }
        merge(&mut value, overlay);
    }
    merge(&mut value, flags);
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid training configuration")?;
    // One seed drives model initialisation and batch order.
    cfg.model.init_seed = cfg.train.seed;
    cfg.train.validate()?;
    cfg.model.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                if v.is_null() {
                    continue;
                }
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Builds the flag overlay from optional values, skipping the unset ones.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    pub fn model<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            let model = self
                .0
                .entry("model")
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("model overlay is an object");
            model.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }
}
