//! Run configuration file and `key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hierloss::{SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
}

/// Either a dataset directory or a synthetic generator spec.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambda1: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            lambda2: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub keep_ce: bool,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// One dotted-path assignment such as `train.loss.lambda1 = 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn new(key: &str, value: impl Into<Value>) -> Self {
        Override {
            key: key.to_string(),
            value: value.into(),
        }
    }

    /// Parses `key=value`; the value is read as a TOML literal and falls back
    /// to a bare string.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {text:?} is not key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(config_err(format!("override {text:?} has an empty key segment")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Override {
            key: key.to_string(),
            value,
        })
    }

    fn apply(&self, root: &mut Table) -> anyhow::Result<()> {
        let parts: Vec<&str> = self.key.split('.').collect();
        let (last, inner) = parts.split_last().expect("nonempty key");
        let mut table = root;
        for (i, part) in inner.iter().enumerate() {
            let entry = table
                .entry(part.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            table = match entry {
                Value::Table(t) => t,
                _ => bail!(config_err(format!(
                    "override {}: {} is not a table",
                    self.key,
                    parts[..=i].join(".")
                ))),
            };
        }
        table.insert(last.to_string(), self.value.clone());
        Ok(())
    }
}

/// Parses a comma-separated list of numbers.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, String> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("bad list entry {s:?}")))
        .collect()
}

/// Defaults, then the file at `path`, then `overrides` in order. Unknown keys
/// and ill-typed values are rejected.
pub fn resolve(path: Option<&Path>, overrides: &[Override]) -> anyhow::Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = crate::read_input(p)?;
            toml::from_str::<Table>(&text)
                .map_err(|e| config_err(format!("malformed config {}: {}", p.display(), e.message())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        o.apply(&mut table)?;
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(format!("invalid config: {}", e.message())))?;
    config.train.validate().context("invalid train section")?;
    config.data.synth.validate().context("invalid data.synth section")?;
    Ok(config)
}

pub fn to_toml(config: &RunConfig) -> anyhow::Result<String> {
    toml::to_string(config).context("serializing resolved config")
}
