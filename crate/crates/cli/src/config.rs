//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use segdiff_core::netseg::{DiffusionConfig, ModelConfig, TrainConfig};
use segdiff_core::synthdata::SplitMode;
use segdiff_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a training run needs besides the data files themselves. A run
/// is reproducible from this file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    /// Expected split mode of the manifest, checked when set.
    pub split_mode: Option<SplitMode>,
    pub seed: u64,
    /// Checkpoint, logs and reports go here; relative to the config file.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            manifest: PathBuf::from("data/manifest.json"),
            split_mode: None,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.diffusion.build()?;
        Ok(())
    }
}
