//! Layered configuration: preset defaults, then an optional TOML file, then
//! command-line flags.

use occtip::duomamba::EncoderConfig;
use occtip::train::{GenConfig, TrainConfig};
use occtip::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use std::path::Path;

const SECTIONS: [&str; 3] = ["encoder", "train", "gen"];

/// Parsed config file, one JSON object per section.
#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: serde_json::Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config file: {e}")))?;
        let Value::Object(sections) = serde_json::to_value(table)? else {
            unreachable!("a TOML table serializes to an object")
        };
        if let Some(key) = sections.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::InvalidConfig(format!(
                "{key}: unknown section (expected one of {})",
                SECTIONS.join(", ")
            )));
        }
        Ok(ConfigFile { sections })
    }

    /// `base` with the named section's keys laid over it.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, section: &str, base: &T) -> Result<T> {
        let mut value = serde_json::to_value(base)?;
        if let Some(over) = self.sections.get(section) {
            merge(&mut value, over);
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("{section}.{e}")))
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn encoder_preset(name: &str) -> Result<EncoderConfig> {
    match name {
        "toy" => Ok(EncoderConfig::toy()),
        "desk" => Ok(EncoderConfig::desk()),
        "paper" => Ok(EncoderConfig::paper()),
        other => Err(Error::InvalidConfig(format!("preset: unknown encoder preset {other:?}"))),
    }
}

pub fn train_preset(name: &str) -> Result<TrainConfig> {
    match name {
        "desk" => Ok(TrainConfig::desk()),
        "paper" => Ok(TrainConfig::paper()),
        other => Err(Error::InvalidConfig(format!("train-preset: unknown training preset {other:?}"))),
    }
}

pub fn gen_defaults() -> GenConfig {
    GenConfig::default()
}
