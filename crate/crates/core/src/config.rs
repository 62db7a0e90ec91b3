//! Single JSON run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::guard::{LatencyBudget, RegionConfig};
use crate::nets::{DiscriminatorConfig, UNetConfig};
use crate::train::{ModelConfig, TrainConfig};

/// Every section is optional in the file; missing keys take defaults and
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub generator: UNetConfig,
    pub discriminator: DiscriminatorConfig,
    pub latency: LatencyBudget,
    pub region: RegionConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io("config", "load", path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate().map_err(|e| Error::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.latency.validate()?;
        let need = self.generator.required_multiple();
        if !self.scene.width.is_multiple_of(need) || !self.scene.height.is_multiple_of(need) {
            return Err(Error::invalid(
                "config",
                "validate",
                format!(
                    "scene {}x{} is not a multiple of {need} required by generator depth {}",
                    self.scene.width, self.scene.height, self.generator.depth
                ),
            ));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"train": {"epochs": 3}, "latency": {"policy": "abort-frame"}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.latency.budget_ms, 300.0);
        assert_eq!(cfg.region.consecutive_frames_to_override, 2);
        assert_eq!(cfg.generator, UNetConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"train": {"epochs": 3, "epoch": 4}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config { .. })));
        std::fs::write(&p, r#"{"scene": {"width": 60}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config { .. })));
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
