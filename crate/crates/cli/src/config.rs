//! Run configuration: a versioned TOML document plus dotted-key overrides.

use std::path::{Path, PathBuf};

use pvda_core::trainer::{TrainConfig, Variant};
use pvda_core::DomainPairSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// The shipped reference task, used when no `--config` is given.
pub const REFERENCE_CONFIG: &str = include_str!("../configs/reference.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Source dataset for `train`; `<out_dir>/source.bin` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { out_dir: default_out_dir(), source: None, target: None }
    }
}

impl OutputConfig {
    pub fn source_path(&self) -> PathBuf {
        self.source.clone().unwrap_or_else(|| self.out_dir.join("source.bin"))
    }

    pub fn target_path(&self) -> PathBuf {
        self.target.clone().unwrap_or_else(|| self.out_dir.join("target.bin"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Also sweep the MCAN cluster count over `1..=k_sweep_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_sweep_max: Option<usize>,
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Mcan, Variant::Man]
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { variants: default_variants(), seeds: default_seeds(), k_sweep_max: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DomainPairSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_CONFIG, &[]).expect("shipped reference config is valid")
    }

    /// Reads `path` (or the reference config), applies `key=value`
    /// overrides in order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => REFERENCE_CONFIG.to_string(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::validation(None, format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::validation(None, format!("config schema: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::validation(
                "schema_version".to_string(),
                format!("unsupported schema_version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.data.validate()?;
        self.train.validate()?;
        let target_total: usize = self.data.target_class_counts.iter().sum();
        if self.train.calibration.k > target_total {
            return Err(CliError::validation(
                "train.calibration.k".to_string(),
                format!("{} clusters for {target_total} target samples", self.train.calibration.k),
            ));
        }
        if self.ablation.seeds.is_empty() {
            return Err(CliError::validation("ablation.seeds".to_string(), "at least one seed is required"));
        }
        if self.ablation.k_sweep_max == Some(0) {
            return Err(CliError::validation("ablation.k_sweep_max".to_string(), "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::validation(None, format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::validation(None, format!("override key {key:?} is malformed")));
    }
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::validation(key.to_string(), format!("{p} is not a table")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}
