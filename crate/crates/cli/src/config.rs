use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use meshformer::augment::AugmentSpec;
use meshformer::model::ModelConfig;
use meshformer::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Configuration of `train` and `pretrain`. Relative paths resolve against the
/// working directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    /// `p_in` and `p_out` are taken from the dataset.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Replaces `model.augment` when given.
    #[serde(default)]
    pub augment: Option<AugmentSpec>,
    /// Replaces `train.seed` and seeds initialization.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Pretrained encoder checkpoint whose trunk initializes the model.
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    #[serde(default = "default_normalizer_samples")]
    pub normalizer_samples: usize,
}

fn default_normalizer_samples() -> usize {
    512
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
}

/// Configuration of `scaling-sweep`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub eval_data: Option<PathBuf>,
    pub budgets: Vec<f64>,
    pub grid: Vec<GridPoint>,
    /// Shared settings for every grid point; its `d`, `layers` and `heads` are replaced.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub refine: bool,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Copies the config file verbatim into the output directory.
pub fn copy_config(config: &Path, out: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::copy(config, out.join(name)).with_context(|| format!("copying {}", config.display()))?;
    Ok(())
}
