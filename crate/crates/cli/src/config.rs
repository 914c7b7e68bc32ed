//! Run configuration: one JSON document, defaults filled in, optionally
//! patched by dotted-path overrides such as `--train.lambda=50`.

use std::path::{Path, PathBuf};

use debias::evaluation::TsneConfig;
use debias::models::ArchConfig;
use debias::synth::SynthConfig;
use debias::training::TrainingConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Where the dataset comes from: a DBDS file when `path` is set, the
/// generator otherwise.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    /// Average codes per group before probing.
    pub aggregate: bool,
    pub standardize: bool,
    /// Exclude same-group rows from each query's neighbours.
    pub exclude_same_group: bool,
    pub permutations: usize,
    pub tsne: TsneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 3,
            aggregate: true,
            standardize: false,
            exclude_same_group: false,
            permutations: 100_000,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainingConfig,
    pub eval: EvalConfig,
    /// λ values, one sweep row each, in this order.
    pub sweep: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            train: TrainingConfig::default(),
            eval: EvalConfig::default(),
            sweep: vec![0.0, 1.0, 50.0],
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Top-level keys that may be overridden from the command line.
pub const SECTIONS: [&str; 6] = ["data", "arch", "train", "eval", "sweep", "out_dir"];

/// Is `arg` of the form `--section.path=value` or `--section=value`?
pub fn is_override(arg: &str) -> bool {
    let Some(body) = arg.strip_prefix("--") else { return false };
    let Some((key, _)) = body.split_once('=') else { return false };
    let head = key.split('.').next().unwrap_or("");
    SECTIONS.contains(&head)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("override {path}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the optional config file, then each override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(CliError::Usage("config must be a JSON object".into()));
            }
            merge(&mut doc, patch);
        }
        for o in overrides {
            let body = o.trim_start_matches("--");
            let (key, raw) = body
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {o} must look like --key=value")))?;
            set_path(&mut doc, key, parse_value(raw))?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.synth.validate().map_err(CliError::from_core)?;
        self.arch.validate().map_err(CliError::from_core)?;
        self.train.validate().map_err(CliError::from_core)?;
        if self.eval.k == 0 {
            return Err(CliError::Usage("eval.k must be positive".into()));
        }
        if self.sweep.is_empty() || self.sweep.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(CliError::Usage("sweep must list non-negative λ values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
