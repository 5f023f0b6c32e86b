use std::path::{Path, PathBuf};

use anyhow::Context;
use cocal::dataset::SceneSpec;
use cocal::trainer::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::Invalid;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Taxonomy document for `gen-data`; the built-in one otherwise.
    pub taxonomy: Option<PathBuf>,
}

/// Configuration file shared by every subcommand. Flags take precedence over
/// file values, which take precedence over defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    /// Number of scenes `gen-data` writes.
    pub count: usize,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            count: 200,
            experiment: ExperimentConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        Ok(config)
    }
}

/// Resolves a required path: flag first, then the config file.
pub fn require(flag: Option<PathBuf>, from_config: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| Invalid(format!("no {what} given (flag or config `paths`)")).into())
}

pub fn existing(path: PathBuf, what: &str) -> anyhow::Result<PathBuf> {
    if !path.exists() {
        return Err(Invalid(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(path)
}

pub fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}
