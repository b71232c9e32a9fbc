//! The resolved run configuration: a TOML file, then dotted `key=value`
//! overrides, then validation.

use std::path::{Path, PathBuf};

use collab_core::attention::AttentionVariant;
use collab_core::metrics::ReportFormat;
use collab_core::model::ModelConfig;
use collab_core::scenario::{ScenarioConfig, Setting, SplitSeeds, SplitSizes};
use collab_core::train::{RunSpec, TrainConfig};
use collab_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// File name of the frozen configuration written next to every output.
pub const FROZEN_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub seeds: SplitSeeds,
    pub sizes: SplitSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub format: ReportFormat,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { format: ReportFormat::Csv }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub message_sizes: Vec<usize>,
    pub key_sizes: Vec<usize>,
    /// Training iterations per grid point (0 = `train.iterations`).
    pub iterations: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            message_sizes: vec![1, 2, 4, 8, 16, 64],
            key_sizes: vec![4, 16, 64, 256, 1024],
            iterations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of the init, training and selection substreams.
    pub seed: u64,
    pub setting: Setting,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`a.b.c=value`, value in TOML
    /// syntax or a bare string), copies the root seed into `train.seed` and
    /// validates the result. An explicit `train.seed` must equal the root
    /// seed.
    pub fn resolve(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut root: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let explicit_train_seed = root.get("train").and_then(|t| t.get("seed")).cloned();
        let mut cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        if let Some(v) = explicit_train_seed {
            if v.as_integer() != i64::try_from(cfg.seed).ok() {
                return Err(Error::Config(format!("train.seed = {v} disagrees with the root seed {}", cfg.seed)).into());
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.scenario.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.split.seeds.validate()?;
        let pairs = [
            ("classes", self.scenario.classes, self.model.classes),
            ("agents", self.scenario.agents, self.model.agents),
            ("view_size", self.scenario.view_size, self.model.obs_size),
        ];
        for (name, s, m) in pairs {
            if s != m {
                return Err(Error::Config(format!("scenario.{name} is {s} but the model expects {m}")).into());
            }
        }
        if self.model.obs_channels != 3 {
            return Err(Error::Config("scenario views have 3 channels".into()).into());
        }
        if self.sweep.message_sizes.is_empty() || self.sweep.key_sizes.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()).into());
        }
        if self.sweep.message_sizes.contains(&0) || self.sweep.key_sizes.contains(&0) {
            return Err(Error::Config("sweep sizes must be positive".into()).into());
        }
        Ok(())
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            model: self.model,
            train: self.train.clone(),
            scenario: self.scenario.clone(),
        }
    }

    /// Model configuration for one sweep grid point.
    pub fn sweep_point(&self, m: usize, k: usize) -> Result<ModelConfig, Error> {
        let cfg = ModelConfig {
            message_size: m,
            key_size: k,
            ..self.model
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn uses_scaled_dot(&self) -> bool {
        self.model.attention == AttentionVariant::ScaledDot
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn freeze(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(FROZEN_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(Error::from)?;
        Ok(path)
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().unwrap();
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
