//! Declarative run configuration. Every field is optional; command-line
//! flags win over the file, and the file wins over built-in defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: Option<u32>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub render: RenderSection,
    #[serde(default)]
    pub folds: FoldsSection,
    #[serde(default)]
    pub annotate: AnnotateSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub decoder: Option<String>,
    pub encoder: Option<String>,
    pub frozen: Option<bool>,
    pub scale: Option<String>,
    pub input_size: Option<usize>,
    pub seed: Option<u64>,
    pub weights: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub memory_budget: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSection {
    pub tau_vis: Option<f64>,
    pub threshold: Option<f64>,
    pub min_area_px: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldsSection {
    pub k: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateSection {
    pub seed: Option<u64>,
    pub lock_ttl_minutes: Option<u64>,
    pub stage1_configs: Option<Vec<String>>,
    pub stage2_configs: Option<Vec<String>>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        match cfg.schema_version {
            Some(SCHEMA_VERSION) => Ok(cfg),
            Some(v) => Err(CliError::Usage(format!(
                "config {}: schema_version {v} is not supported (expected {SCHEMA_VERSION})",
                path.display()
            ))),
            None => Err(CliError::Usage(format!("config {}: missing schema_version", path.display()))),
        }
    }
}
