use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use coprompt::data::SuiteConfig;
use coprompt::encoder::{EncoderConfig, PretrainConfig};
use coprompt::trainer::TrainConfig;

use crate::ablation::AblationAxes;
use crate::CliError;

/// One-factor sweep: `key` is a dotted path into [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub key: String,
    pub values: Vec<Value>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            key: "lambda".into(),
            values: [0.0, 0.1, 1.0, 2.0, 8.0].into_iter().map(Value::from).collect(),
        }
    }
}

/// Everything a command needs. Relative paths resolve against the working
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Suite root written by `gen-data` and read by every other command.
    pub data_dir: PathBuf,
    pub suite: SuiteConfig,
    /// Backbone written by `pretrain` and read by every later command.
    pub backbone_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Checkpoint evaluated by `eval`; unset evaluates the bare backbone.
    pub checkpoint_dir: Option<PathBuf>,
    /// Seed list of `ablate` and `sweep`.
    pub seeds: Vec<u64>,
    pub ablation: AblationAxes,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: "runs/data".into(),
            suite: SuiteConfig::default(),
            backbone_dir: "runs/backbone".into(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            checkpoint_dir: None,
            seeds: vec![0, 1, 2, 3, 4],
            ablation: AblationAxes::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Sets the value at a dotted path. Every segment must already exist, so a
/// misspelled key is an error rather than a silent no-op. The value is
/// parsed as JSON when possible and taken as a string otherwise.
pub fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<(), CliError> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for seg in path.split('.') {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(seg)
                .ok_or_else(|| CliError::Usage(format!("unknown config key `{path}`")))?,
            _ => return Err(CliError::Usage(format!("`{path}` does not name a config field"))),
        };
    }
    *cur = value;
    Ok(())
}

/// Parses `key=value`.
pub fn split_override(s: &str) -> Result<(&str, &str), CliError> {
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| CliError::Usage(format!("override `{s}` is not key=value")))
}

fn parse<T: for<'de> Deserialize<'de>>(value: Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

impl RunConfig {
    /// File (or defaults), then overrides, then a strict re-parse.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let base: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base).map_err(|e| CliError::Usage(e.to_string()))?;
        for o in overrides {
            let (k, v) = split_override(o)?;
            set_path(&mut value, k, v)?;
        }
        parse(value, "config")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}

/// `base` with the sweep key set to one value.
pub fn sweep_point(base: &TrainConfig, key: &str, value: &Value) -> Result<TrainConfig, CliError> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Usage(e.to_string()))?;
    set_path(&mut v, key, &value.to_string())?;
    let cfg: TrainConfig = parse(v, &format!("sweep {key}={value}"))?;
    cfg.validate()?;
    Ok(cfg)
}
