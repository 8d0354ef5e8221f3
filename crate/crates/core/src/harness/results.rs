//! Per-run result records. One pretty-printed JSON object per file, fields in
//! declaration order. Wall-clock time goes to a separate sidecar so that a
//! rerun with the same configuration reproduces the record byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::pipeline::Evaluation;
use crate::adapt::{EpochLog, TrainLog};
use crate::error::{Error, Result};

/// SHA-256 of the configuration as JSON with keys sorted at every level.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    json_hash(config)
}

pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let text = serde_json::to_string(&sort_keys(canonical))?;
    Ok(hex(&Sha256::digest(text.as_bytes())))
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(xs) => Value::Array(xs.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Final metrics of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `f1` or `anls`.
    pub metric_name: String,
    pub metric: f64,
    pub ece: f64,
    /// Fraction of target units accepted in the last adaptation epoch.
    pub acceptance_rate: Option<f64>,
}

impl Metrics {
    pub fn from_eval(eval: &Evaluation, acceptance_rate: Option<f64>) -> Self {
        Self {
            metric_name: eval.metric_name.clone(),
            metric: eval.metric,
            ece: eval.ece,
            acceptance_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub run_id: String,
    pub command: String,
    /// `pretrain`, `source-only`, `doctta`, `docuda`, `tent`, `eval`, ...
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    /// How the reported source model was picked.
    pub model_selection: Option<String>,
    pub train_log: Option<TrainLog>,
    pub pretrain_losses: Option<Vec<f64>>,
    pub epochs: Vec<EpochLog>,
    /// Target metrics of the starting model, for adaptation runs.
    pub before: Option<Metrics>,
    pub metrics: Option<Metrics>,
    /// Extra named scalars (e.g. source-val metric of the selected epoch).
    pub extra: Vec<(String, f64)>,
    pub config: RunConfig,
}

impl ResultsRecord {
    pub fn new(command: &str, method: &str, config: &RunConfig) -> Result<Self> {
        let hash = config_hash(config)?;
        Ok(Self {
            run_id: format!(
                "{command}-{method}-{}-s{}-{}",
                config.task.name(),
                config.seed,
                &hash[..12]
            ),
            command: command.to_string(),
            method: method.to_string(),
            task: config.task.name().to_string(),
            seed: config.seed,
            config_hash: hash,
            model_selection: None,
            train_log: None,
            pretrain_losses: None,
            epochs: Vec::new(),
            before: None,
            metrics: None,
            extra: Vec::new(),
            config: config.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `<dir>/<run_id>.json` and the `<run_id>.timing.json` sidecar;
    /// returns the record path.
    pub fn write(&self, dir: &Path, wall_clock_secs: f64) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}.json", self.run_id));
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        let timing = dir.join(format!("{}.timing.json", self.run_id));
        let body = serde_json::json!({ "run_id": self.run_id, "wall_clock_secs": wall_clock_secs });
        fs::write(&timing, format!("{body}\n")).map_err(|e| Error::io(&timing, e))?;
        Ok(path)
    }
}
