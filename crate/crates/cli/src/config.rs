use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dsformer::attention::AttnMode;
use dsformer::data::Quality;
use dsformer::energy::EnergyModel;
use dsformer::model::ModelConfig;
use dsformer::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::exit::ConfigError;

/// Everything a command needs; sections mirror the library modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides `training.seed`.
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub energy: EnergyConfig,
    pub bench: BenchConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            energy: EnergyConfig::default(),
            bench: BenchConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset used by train, eval, energy and sweep.
    pub path: Option<PathBuf>,
    pub env: String,
    pub episodes: usize,
    pub quality: Quality,
    pub sparse: bool,
    pub grid: usize,
    /// Defaults to `8 (grid - 1)` for KeyDoor and 50 for Reacher.
    pub max_len: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            env: "keydoor".into(),
            episodes: 500,
            quality: Quality::Medium,
            sparse: false,
            grid: 8,
            max_len: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub episodes: usize,
    pub target_return_multiplier: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            episodes: 10,
            target_return_multiplier: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub e_mac: f64,
    pub e_ac: f64,
    /// Dataset windows the spike rates are measured on.
    pub batch: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        let m = EnergyModel::default();
        Self {
            e_mac: m.e_mac,
            e_ac: m.e_ac,
            batch: 64,
        }
    }
}

impl EnergyConfig {
    pub fn model(&self) -> EnergyModel {
        EnergyModel {
            e_mac: self.e_mac,
            e_ac: self.e_ac,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub modes: Vec<AttnMode>,
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ns: vec![16, 32, 64, 128],
            modes: AttnMode::ALL.to_vec(),
            batch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub timesteps: Vec<usize>,
    pub windows: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![1, 2, 4],
            windows: vec![2, 8],
            seeds: vec![0],
        }
    }
}

/// Recursively overwrite `base` with every key present in `over`.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Set `path` (dot-separated) in `table` to `value`, creating sections.
pub fn set(table: &mut Table, path: &str, value: impl Into<Value>) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("section key holds a table");
    }
    t.insert(last.to_string(), value.into());
}

/// Defaults, then the config file, then flag overrides.
pub fn resolve(file: Option<&Path>, flags: Table) -> Result<RunConfig> {
    let mut table = Table::try_from(RunConfig::default()).context("serializing default config")?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("reading config {}: {e}", path.display())))?;
        let parsed: Table = text
            .parse()
            .map_err(|e| ConfigError(format!("parsing config {}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    merge(&mut table, flags);
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| ConfigError(format!("invalid config: {e}")))?;
    cfg.training.seed = cfg.seed;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    Ok(toml::to_string_pretty(cfg).context("serializing config")?)
}
