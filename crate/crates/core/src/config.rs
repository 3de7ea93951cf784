//! The run configuration bundle `{model, train, data}` and the manifest
//! written beside every run's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const MANIFEST_VERSION: u32 = 1;

fn default_eval_windows() -> usize {
    16
}
fn default_analysis_sequences() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training shards. Relative paths resolve against the config file.
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub valid: Vec<PathBuf>,
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
    /// Windows per forward during evaluation.
    #[serde(default = "default_eval_windows")]
    pub eval_windows_per_batch: usize,
    /// Validation windows stacked into one trace for analysis.
    #[serde(default = "default_analysis_sequences")]
    pub analysis_sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Every cross-field check, before any compute.
    pub fn validate(&self) -> Result<()> {
        self.train.validate_with(&self.model)?;
        if self.data.train.is_empty() {
            return Err(Error::Config("data.train lists no shards".into()));
        }
        if self.data.eval_windows_per_batch == 0 || self.data.analysis_sequences == 0 {
            return Err(Error::Config(
                "data.eval_windows_per_batch and data.analysis_sequences must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.train.iter_mut().for_each(fix);
        self.data.valid.iter_mut().for_each(fix);
        if let Some(t) = self.data.tokenizer.as_mut() {
            fix(t);
        }
        if let Some(w) = self.train.warm_start.as_mut() {
            fix(w);
        }
    }
}

/// Parse a config bundle, or the `config` field of a run manifest, fill the
/// defaults, resolve relative paths against the file's directory and
/// validate. Unknown keys are errors.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let value = match value.get("manifest_version") {
        Some(_) => value.get("config").cloned().ok_or_else(|| Error::Format {
            path: path.into(),
            reason: "manifest has no config".into(),
        })?,
        None => value,
    };
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = std::path::absolute(parent).map_err(|e| Error::io(parent, e))?;
    cfg.resolve_paths(&base);
    cfg.validate()?;
    Ok(cfg)
}

/// What a command ran with, so its outputs can be reproduced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: Vec<String>,
    /// The fully resolved configuration of the command.
    pub config: serde_json::Value,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub git_commit: Option<String>,
}

impl Manifest {
    pub fn new(command: Vec<String>, config: serde_json::Value) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command,
            config,
            inputs: BTreeMap::new(),
            git_commit: None,
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let hash = if path.is_dir() {
            crate::train::checkpoint::checkpoint_hash(path)?
        } else {
            sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
        };
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
