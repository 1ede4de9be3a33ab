//! TOML experiment configs layered as: command defaults, config file,
//! `MARGIN_FORGE_SEED`, `--set key=value`, then typed flags.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use margin_forge::datasets::ImbalanceSpec;
use margin_forge::{LossSpec, OptimConfig, RegularizerSpec, RieszConfig};

use crate::error::CliError;

pub const SEED_ENV: &str = "MARGIN_FORGE_SEED";

/// One entry of a loss/regularizer grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossSpec>,
    #[serde(default)]
    pub reg: RegularizerSpec,
}

impl RunEntry {
    pub fn new(name: &str, loss: Option<LossSpec>, reg: RegularizerSpec) -> Self {
        Self { name: name.into(), loss, reg }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RieszCmd {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub k: usize,
    pub d: usize,
    pub riesz: RieszConfig,
    /// Settings for each continuation stage.
    pub optim: OptimConfig,
}

impl Default for RieszCmd {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "out/riesz".into(),
            k: 4,
            d: 3,
            riesz: RieszConfig::default(),
            optim: RieszConfig::default_optim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCmd {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub k: usize,
    pub d: usize,
    pub per_class: usize,
    pub optim: OptimConfig,
    pub run: Vec<RunEntry>,
}

impl Default for ToyCmd {
    fn default() -> Self {
        let none = RegularizerSpec::none;
        Self {
            seed: 0,
            output_dir: "out/toy".into(),
            k: 8,
            d: 3,
            per_class: 10,
            optim: OptimConfig::default(),
            run: vec![
                RunEntry::new("normface", Some(LossSpec::normface(64.0)), none()),
                RunEntry::new("cosface", Some(LossSpec::cosface(64.0, 0.35)), none()),
                RunEntry::new("arcface", Some(LossSpec::arcface(64.0, 0.5)), none()),
                RunEntry::new("lm_softmax", Some(LossSpec::lm_softmax(64.0)), none()),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub k: usize,
    pub d_in: usize,
    pub spread: f64,
    pub imbalance: ImbalanceSpec,
    /// Balanced test set size per class.
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { k: 4, d_in: 2, spread: 0.3, imbalance: ImbalanceSpec::balanced(50), test_per_class: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![32, 32], embed_dim: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub optim: OptimConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            eval_every: 20,
            optim: OptimConfig { lr0: 0.05, steps: 1, t_max: 200, log_every: 0, ..OptimConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmd {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub run: Vec<RunEntry>,
}

impl Default for TrainCmd {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "out/train".into(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            run: vec![
                RunEntry::new("ce", Some(LossSpec::softmax_ce()), RegularizerSpec::none()),
                RunEntry::new("ce_r_sm", Some(LossSpec::softmax_ce()), RegularizerSpec::sample_margin(0.5)),
            ],
        }
    }
}

/// Rejects empty, duplicate or path-unsafe run names.
pub fn check_run_names(runs: &[RunEntry]) -> Result<(), CliError> {
    if runs.is_empty() {
        return Err(CliError::Config("at least one [[run]] entry is required".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in runs {
        let safe = !r.name.is_empty()
            && r.name != "."
            && r.name != ".."
            && r.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-+.".contains(c));
        if !safe {
            return Err(CliError::Config(format!("run name {:?} must be non-empty and use only [A-Za-z0-9_+.-]", r.name)));
        }
        if !seen.insert(r.name.as_str()) {
            return Err(CliError::Config(format!("duplicate run name {:?}", r.name)));
        }
    }
    Ok(())
}

/// An override in `a.b.c=value` form; list entries are addressed by index.
#[derive(Clone, Debug)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn parse(raw: &str) -> Result<Self, CliError> {
        let (key, val) =
            raw.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects key=value, got {raw:?}")))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("bad key in --set {raw:?}")));
        }
        Ok(Self { path, value: parse_value(val.trim()) })
    }

    pub fn typed(key: &str, value: Value) -> Self {
        Self { path: vec![key.to_string()], value }
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply(table: &mut Table, ov: &Override) -> Result<(), CliError> {
    let dotted = ov.path.join(".");
    let mut cur: &mut Value = table
        .entry(ov.path[0].clone())
        .or_insert_with(|| if ov.path.len() > 1 { Value::Table(Table::new()) } else { ov.value.clone() });
    for key in &ov.path[1..] {
        cur = match cur {
            Value::Table(t) => t.entry(key.clone()).or_insert_with(|| Value::Table(Table::new())),
            Value::Array(a) => {
                let i: usize = key.parse().map_err(|_| CliError::Config(format!("{dotted}: {key:?} is not a list index")))?;
                let len = a.len();
                a.get_mut(i).ok_or_else(|| CliError::Config(format!("{dotted}: index {i} out of range ({len} entries)")))?
            }
            _ => return Err(CliError::Config(format!("{dotted}: cannot descend into a scalar"))),
        };
    }
    *cur = ov.value.clone();
    Ok(())
}

pub fn seed_from_env() -> Result<Option<Override>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let seed: i64 = v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not a seed")))?;
            Ok(Some(Override::typed("seed", Value::Integer(seed))))
        }
        _ => Ok(None),
    }
}

/// Builds a config from the command defaults, an optional file and the
/// overrides in order.
pub fn resolve<T>(defaults: &T, file: Option<&Path>, overrides: &[Override]) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned,
{
    let mut table = Table::try_from(defaults).map_err(|e| CliError::Config(format!("defaults: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let parsed: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    for ov in overrides {
        apply(&mut table, ov)?;
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}
