//! Flat `key = value` configuration.
//!
//! Keys are grouped by prefix: `data.*` (synthetic generator), `model.*`
//! (encoder), `train.*` (optimizer and loop), `gradcheck.*`, plus the
//! top-level `seed` and `test_examples`. Values are JSON scalars; string
//! fields take the raw text. A file is read first, then `--set` pairs and
//! dedicated flags are applied on top.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

const SECTIONS: [&str; 4] = ["data", "model", "train", "gradcheck"];
const TOP_LEVEL: [&str; 2] = ["seed", "test_examples"];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Settings {
    entries: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str, origin: &str) -> Result<Self, Failure> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Failure::Config(format!("{origin}:{}: expected `key = value`", i + 1))
            })?;
            s.set(k.trim(), v.trim())
                .map_err(|e| Failure::Config(format!("{origin}:{}: {}", i + 1, e.message())))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let known = TOP_LEVEL.contains(&key)
            || key
                .split_once('.')
                .is_some_and(|(sec, rest)| SECTIONS.contains(&sec) && !rest.is_empty());
        if !known {
            return Err(Failure::Config(format!("unknown setting `{key}`")));
        }
        if key == "data.seed" || key == "train.seed" {
            return Err(Failure::Config(format!("`{key}` is derived; set `seed` instead")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply_pairs(&mut self, pairs: &[String]) -> Result<(), Failure> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got `{p}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    fn top<T: DeserializeOwned>(&self, key: &str, default: T) -> Result<T, Failure> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => serde_json::from_str(raw)
                .map_err(|e| Failure::Config(format!("`{key}` = `{raw}`: {e}"))),
        }
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.top("seed", 0)
    }

    pub fn test_examples(&self) -> Result<usize, Failure> {
        self.top("test_examples", 500)
    }

    /// Overlay `prefix.*` keys on `T::default()`.
    pub fn section<T>(&self, prefix: &str) -> Result<T, Failure>
    where
        T: Serialize + DeserializeOwned + Default,
    {
        let mut obj = match serde_json::to_value(T::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config sections serialize to objects"),
        };
        let lead = format!("{prefix}.");
        for (key, raw) in &self.entries {
            let Some(field) = key.strip_prefix(&lead) else {
                continue;
            };
            let current = obj
                .get(field)
                .ok_or_else(|| Failure::Config(format!("unknown setting `{key}`")))?;
            let value = match current {
                Value::String(_) => Value::String(raw.clone()),
                _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone())),
            };
            obj.insert(field.to_string(), value);
        }
        serde_json::from_value(Value::Object(obj))
            .map_err(|e| Failure::Config(format!("{prefix} settings: {e}")))
    }
}

/// Tolerances and sampling for the `gradcheck` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub step: f64,
    pub tolerance: f64,
    pub tokens: usize,
    pub kink_margin: f64,
    pub max_attempts: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            tokens: 5,
            kink_margin: 1e-3,
            max_attempts: 50,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mag_core::encoder::{EncoderConfig, Injection};
    use mag_core::train::TrainConfig;

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::parse(
            "# toy\nseed = 3\nmodel.injection = E\nmodel.n_layers=2\ntrain.learning_rate = 0.01\n",
            "cfg",
        )
        .unwrap();
        s.apply_pairs(&["model.n_layers=3".into()]).unwrap();
        let m: EncoderConfig = s.section("model").unwrap();
        assert_eq!(m.n_layers, 3);
        assert_eq!(m.injection, Injection::Embedding);
        let t: TrainConfig = s.section("train").unwrap();
        assert_eq!(t.learning_rate, 0.01);
        assert_eq!(s.seed().unwrap(), 3);
    }

    #[test]
    fn optional_fields_accept_numbers() {
        let s = Settings::parse("train.dropout_p = 0.25\nmodel.injection = 2\n", "cfg").unwrap();
        let t: TrainConfig = s.section("train").unwrap();
        assert_eq!(t.dropout_p, Some(0.25));
        let m: EncoderConfig = s.section("model").unwrap();
        assert_eq!(m.injection, Injection::Layer(2));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Settings::parse("bogus = 1\n", "cfg").is_err());
        assert!(Settings::parse("no equals sign\n", "cfg").is_err());
        assert!(Settings::parse("data.seed = 1\n", "cfg").is_err());
        let s = Settings::parse("model.n_layerz = 1\n", "cfg").unwrap();
        assert!(s.section::<EncoderConfig>("model").is_err());
        let s = Settings::parse("model.n_layers = many\n", "cfg").unwrap();
        assert!(s.section::<EncoderConfig>("model").is_err());
    }
}
