//! Run configuration files.
//!
//! A run file names a preset and overrides any subset of its keys:
//!
//! ```toml
//! preset = "desk"
//! name = "ablation"
//!
//! [train]
//! epochs = 12
//!
//! [train.loss_weights]
//! lambda_ac = 0.0
//! ```
//!
//! User values are merged over the preset table by table, unknown keys are
//! rejected, and errors name the offending key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::evaluator::Ranking;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate in memory from `[synth]`.
    Synthetic,
    /// Load `<path>/<view>/<action>/<image>` from disk.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Held-out view name for `train`; `loco` rotates over all views.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_view: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ranking: Ranking,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub name: String,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let train = TrainConfig::preset(name)?;
        let (source, path, synth) = match name {
            "paper" => (
                DataSource::Directory,
                Some(PathBuf::from("data/100driver")),
                SynthConfig::default(),
            ),
            "tiny" => (
                DataSource::Synthetic,
                None,
                SynthConfig {
                    actions: 4,
                    views: 3,
                    per_cell: 6,
                    image_size: 8,
                    ..SynthConfig::default()
                },
            ),
            _ => (DataSource::Synthetic, None, SynthConfig::default()),
        };
        Ok(Self {
            preset: name.to_owned(),
            name: name.to_owned(),
            output_dir: PathBuf::from("runs"),
            data: DataConfig {
                source,
                path,
                val_fraction: 0.2,
                split_seed: 0,
                test_view: None,
            },
            synth,
            train,
            eval: EvalConfig {
                ranking: Ranking::Restricted,
                label_map: None,
            },
        })
    }

    /// Parse a TOML document, merging it over its preset (default `desk`) and
    /// then applying `overrides` of the form `key.path=value`.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_owned()))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let preset = match user.get("preset") {
            None => "desk".to_owned(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::config("preset: expected a string")),
        };
        let base = Self::preset(&preset)?;
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| Error::config(format!("serializing preset: {e}")))?;
        merge(&mut merged, user);
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(merged))
            .map_err(|e| Error::config(format!("{}: {}", e.path(), e.inner().message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?, overrides)
    }

    /// Preset alone, plus overrides.
    pub fn from_preset(name: &str, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&format!("preset = {:?}", name), overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(
                "name: must be a non-empty single path component",
            ));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction: must lie in (0, 1)"));
        }
        if self.data.source == DataSource::Directory && self.data.path.is_none() {
            return Err(Error::config("data.path: required for directory data"));
        }
        self.synth.validate()?;
        self.train.validate()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// `train.epochs=3`, `data.source="directory"`, `name=foo`. The value is read
/// as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?}: expected key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one item");
    let mut node = table;
    for key in parents {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::config(format!("{path}: {key} is not a table"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
