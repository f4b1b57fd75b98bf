//! Run configuration: defaults, then the `--config` document, then flags.
//!
//! Merging happens on JSON values so every layer is validated by the same
//! deserializer, which rejects unknown keys at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use ssp_core::pipeline::TrainConfig;
use ssp_core::topology::{TopologyConfig, TopologyKind};
use ssp_core::voxel::Split;
use ssp_core::{Result, SspError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Desk,
    Tiny,
}

impl Preset {
    pub fn topology(self, kind: TopologyKind) -> TopologyConfig {
        match self {
            Preset::Paper => TopologyConfig::paper(kind),
            Preset::Desk => TopologyConfig::desk(kind),
            Preset::Tiny => TopologyConfig::tiny(kind),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthBlock {
    pub tasks: usize,
    pub per_task: usize,
    pub shape: [usize; 3],
    pub ratio: usize,
}

impl Default for SynthBlock {
    fn default() -> Self {
        SynthBlock { tasks: 3, per_task: 20, shape: [16, 64, 64], ratio: 2 }
    }
}

/// Everything a command may read. Blocks a command does not use stay empty
/// and are left out of the persisted copy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: String,
    /// Overrides `train.seed` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthBlock>,
    /// Dataset directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
}

fn config_error(what: &str, e: impl std::fmt::Display) -> SspError {
    SspError::Config(format!("{what}: {e}"))
}

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, top: Value) {
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

/// Builder for flag overrides, written as dotted paths.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set(&mut self, path: &str, value: Option<impl Serialize>) -> &mut Self {
        let Some(value) = value else { return self };
        let value = serde_json::to_value(value).expect("flag values serialize");
        let mut parts: Vec<&str> = path.split('.').collect();
        let leaf = parts.pop().expect("non-empty path");
        let mut map = &mut self.0;
        for p in parts {
            map = map
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("override paths do not collide");
        }
        map.insert(leaf.to_string(), value);
        self
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }
}

/// The merged but not yet typed document.
pub struct Layered {
    pub value: Value,
}

impl Layered {
    pub fn load(path: Option<&Path>, command: &str, flags: Overrides) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                let v: Value = serde_json::from_str(&text).map_err(|e| config_error(&p.display().to_string(), e))?;
                if !v.is_object() {
                    return Err(SspError::Config(format!("{}: expected a JSON object", p.display())));
                }
                v
            }
            None => Value::Object(Map::new()),
        };
        merge(&mut value, flags.into_value());
        value.as_object_mut().expect("object").insert("command".into(), Value::String(command.into()));
        Ok(Layered { value })
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.value.get(key)
    }

    /// Whether the user set `topology.<key>` anywhere.
    pub fn has_topology_key(&self, key: &str) -> bool {
        self.get("topology").and_then(|t| t.get(key)).is_some()
    }

    /// Fills `topology.<key>` unless the user set it.
    pub fn default_topology_key(&mut self, key: &str, value: impl Serialize) {
        if self.has_topology_key(key) {
            return;
        }
        let mut o = Overrides::default();
        o.set(&format!("topology.{key}"), Some(value));
        merge(&mut self.value, o.into_value());
    }

    /// Types the document. With `with_topology`, the topology block is
    /// completed from the preset and kind first.
    pub fn resolve(mut self, with_topology: bool) -> Result<RunConfig> {
        if with_topology {
            let preset: Preset = match self.get("preset") {
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_error("preset", e))?,
                None => Preset::default(),
            };
            let kind: TopologyKind = match self.get("topology").and_then(|t| t.get("kind")) {
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_error("topology.kind", e))?,
                None => TopologyKind::Hybrid3to2d,
            };
            let mut base = serde_json::to_value(preset.topology(kind))?;
            if let Some(user) = self.get("topology") {
                merge(&mut base, user.clone());
            }
            let obj = self.value.as_object_mut().expect("object");
            obj.insert("preset".into(), serde_json::to_value(preset)?);
            obj.insert("topology".into(), base);
        }
        let config: RunConfig = serde_json::from_value(self.value).map_err(|e| config_error("config", e))?;
        if config.threads == Some(0) {
            return Err(SspError::Config("threads must be at least 1".into()));
        }
        if let Some(t) = &config.topology {
            t.validate()?;
        }
        Ok(config)
    }
}

pub fn require<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| SspError::Config(format!("missing `{key}` (flag or config key)")))
}
