//! Run configuration file and run-directory naming.

use std::path::{Path, PathBuf};

use painvit::augment::AugmentConfig;
use painvit::dataset::SyntheticSpec;
use painvit::model::PainViTConfig;
use painvit::training::TrainConfig;
use painvit::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable that overrides the default run-directory root.
pub const RUN_ROOT_ENV: &str = "PAINVIT_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

/// Everything a command needs besides its own flags. Missing tables fall
/// back to the published defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Embedding extractor (first model).
    pub model1: PainViTConfig,
    /// Diagram classifier (second model).
    pub model2: PainViTConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub synthetic: SyntheticSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model1.validate()?;
        self.model2.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }

    /// First 12 hex digits of the SHA-256 of the serialized config with the
    /// seed cleared, so seeds of one sweep share a prefix.
    pub fn hash12(&self) -> Result<String> {
        let mut c = self.clone();
        c.seed = 0;
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..12].to_string())
    }

    /// `<root>/<hash12>-<seed>`; `root` comes from the flag, then the
    /// environment, then `runs`.
    pub fn run_dir(&self, root: Option<&Path>) -> Result<PathBuf> {
        let root = match root {
            Some(r) => r.to_path_buf(),
            None => std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT)),
        };
        Ok(root.join(format!("{}-{}", self.hash12()?, self.seed)))
    }

    /// Creates the run directory and records the effective config in it.
    pub fn prepare_run_dir(&self, root: Option<&Path>) -> Result<PathBuf> {
        let dir = self.run_dir(root)?;
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(dir)
    }
}
