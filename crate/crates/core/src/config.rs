//! Run configuration: a TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::baseline::{GlobalClipConfig, StaticGroupClipConfig};
use crate::clip::AggcConfig;
use crate::error::{Error, Result};
use crate::models::TransformerConfig;
use crate::optim::OptimizerConfig;
use crate::registry::GroupingRule;
use crate::workloads::GroupStreamSpec;

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "AGGC_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadConfig {
    /// Gradients drawn from per-group norm processes; no model, no optimizer.
    Synthetic { groups: Vec<GroupStreamSpec> },
    MlpRegression {
        /// Layer widths, input first.
        #[serde(default = "default_layers")]
        layers: Vec<usize>,
        #[serde(default = "default_mlp_batch")]
        batch_size: usize,
    },
    TinyLm {
        #[serde(default)]
        model: TransformerConfig,
        #[serde(default = "default_lm_batch")]
        batch_size: usize,
        /// Successors per token in the Markov data source.
        #[serde(default = "default_branching")]
        branching: usize,
    },
}

fn default_layers() -> Vec<usize> {
    vec![8, 32, 32, 4]
}

fn default_mlp_batch() -> usize {
    32
}

fn default_lm_batch() -> usize {
    8
}

fn default_branching() -> usize {
    4
}

impl WorkloadConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            WorkloadConfig::Synthetic { .. } => "synthetic",
            WorkloadConfig::MlpRegression { .. } => "mlp_regression",
            WorkloadConfig::TinyLm { .. } => "tiny_lm",
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(
                    format!("workload.{field}"),
                    "must be positive",
                ))
            } else {
                Ok(())
            }
        };
        match self {
            WorkloadConfig::Synthetic { groups } => {
                if groups.is_empty() {
                    return Err(Error::config("workload.groups", "need at least one group"));
                }
                groups.iter().try_for_each(GroupStreamSpec::validate)
            }
            WorkloadConfig::MlpRegression { layers, batch_size } => {
                if layers.len() < 2 || layers.contains(&0) {
                    return Err(Error::config(
                        "workload.layers",
                        format!("need at least two positive widths, got {layers:?}"),
                    ));
                }
                positive("batch_size", *batch_size)
            }
            WorkloadConfig::TinyLm {
                model,
                batch_size,
                branching,
            } => {
                model.validate()?;
                positive("batch_size", *batch_size)?;
                positive("branching", *branching)
            }
        }
    }

    /// Name-pattern grouping used when the config gives none.
    pub fn default_grouping(&self) -> Option<GroupingRule> {
        match self {
            WorkloadConfig::Synthetic { .. } => None,
            WorkloadConfig::MlpRegression { .. } => Some(GroupingRule::weight_bias()),
            WorkloadConfig::TinyLm { .. } => Some(GroupingRule::llm_default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyConfig {
    None,
    Global(GlobalClipConfig),
    StaticGroup(StaticGroupClipConfig),
    Aggc(AggcConfig),
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig::Aggc(AggcConfig::default())
    }
}

impl StrategyConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            StrategyConfig::None => "none",
            StrategyConfig::Global(_) => "global",
            StrategyConfig::StaticGroup(_) => "static_group",
            StrategyConfig::Aggc(_) => "aggc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Defaults to `runs/<run_id>`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Sink flush interval in records; 0 flushes only at the end.
    #[serde(default = "default_flush_every")]
    pub flush_every: usize,
}

fn default_flush_every() -> usize {
    256
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            flush_every: default_flush_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub grouping: Option<GroupingRule>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_run_id() -> String {
    "run".to_string()
}

/// Rewrites the field of a config error to sit under `prefix`.
pub(crate) fn under(prefix: &str, err: Error) -> Error {
    match err {
        Error::InvalidConfig { field, message } if !field.starts_with(prefix) => {
            Error::InvalidConfig {
                field: format!("{prefix}.{field}"),
                message,
            }
        }
        other => other,
    }
}

impl RunConfig {
    /// Reads `path` and applies `overrides` (`a.b.c=value`) before parsing.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let mut table = load_table(path)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config(
                "run_id",
                format!("must be a non-empty file name, got `{}`", self.run_id),
            ));
        }
        self.workload.validate().map_err(|e| under("workload", e))?;
        match &self.strategy {
            StrategyConfig::None | StrategyConfig::StaticGroup(_) => {}
            StrategyConfig::Global(g) => g.validate().map_err(|e| under("strategy", e))?,
            StrategyConfig::Aggc(a) => a.validate().map_err(|e| under("strategy", e))?,
        }
        if let Some(g) = &self.grouping {
            if matches!(self.workload, WorkloadConfig::Synthetic { .. }) {
                return Err(Error::config(
                    "grouping",
                    "synthetic workloads take their groups from workload.groups",
                ));
            }
            g.validate()?;
        }
        self.optimizer.validate()?;
        Ok(())
    }

    /// The grouping rule in effect, if the workload has a model.
    pub fn effective_grouping(&self) -> Option<GroupingRule> {
        self.grouping
            .clone()
            .or_else(|| self.workload.default_grouping())
    }

    /// Output directory, with relative paths placed under
    /// [`OUTPUT_ROOT_ENV`] when that variable is set.
    pub fn output_dir(&self) -> PathBuf {
        let dir = self
            .output
            .dir
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&self.run_id));
        resolve_output(dir)
    }
}

pub fn resolve_output(dir: PathBuf) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

fn parse_table(text: &str) -> Result<Table> {
    toml::from_str(text)
        .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))
}

pub fn load_table(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_table(&text).map_err(|e| match e {
        Error::InvalidConfig { message, .. } => Error::config(path.display().to_string(), message),
        other => other,
    })
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `key` (dotted; integer segments index arrays) to `value`, creating
/// intermediate tables as needed.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(key, "malformed override key"));
    }
    let (last, parents) = segments
        .split_last()
        .expect("split yields at least one segment");
    let mut node = table
        .entry(parents.first().copied().unwrap_or(last).to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    if parents.is_empty() {
        *node = value;
        return Ok(());
    }
    for seg in parents[1..].iter().chain(std::iter::once(last)) {
        node = match node {
            Value::Table(t) => t
                .entry(seg.to_string())
                .or_insert_with(|| Value::Table(Table::new())),
            Value::Array(a) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| Error::config(key, format!("`{seg}` is not an array index")))?;
                let len = a.len();
                a.get_mut(idx).ok_or_else(|| {
                    Error::config(key, format!("index {idx} out of range for {len} elements"))
                })?
            }
            _ => return Err(Error::config(key, format!("cannot descend into `{seg}`"))),
        };
    }
    *node = value;
    Ok(())
}

/// Applies one `key=value` override.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    set_path(table, key.trim(), parse_value(raw.trim()))
}
