//! The JSON run configuration shared by every CLI subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::BackboneConfig;
use crate::engine::{TrainConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::resizer::KiprnConfig;
use crate::synth::DatasetSpec;

/// Every field has a default, so `{}` is a complete configuration; unknown
/// keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub kiprn: KiprnConfig,
    pub backbone: BackboneConfig,
    pub train: TrainOptions,
    pub dataset: DatasetSpec,
}

impl RunConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let train = self.train_config();
        train.validate()?;
        if self.backbone.num_classes != self.dataset.num_classes {
            return Err(Error::Config(format!(
                "backbone.num_classes = {} but the dataset has {} classes",
                self.backbone.num_classes, self.dataset.num_classes
            )));
        }
        Ok(())
    }

    /// Sets the training and dataset seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.dataset.seed = seed;
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            kiprn: self.kiprn.clone(),
            backbone: self.backbone.clone(),
            train: self.train.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfigFile::from_json("{}").unwrap(), RunConfigFile::default());
    }

    #[test]
    fn unknown_keys_rejected_at_any_depth() {
        assert!(RunConfigFile::from_json(r#"{"extra": 1}"#).is_err());
        assert!(RunConfigFile::from_json(r#"{"train": {"learning_rate": 1}}"#).is_err());
        assert!(RunConfigFile::from_json(r#"{"kiprn": {"levels": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfigFile::from_json(r#"{"kiprn": {"kernel_mode": "forward"}, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainOptions::default().batch_size);
        assert_eq!(cfg.kiprn.level_sizes, KiprnConfig::default().level_sizes);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfigFile::from_json(r#"{"train": {"batch_size": 0}}"#).is_err());
        assert!(RunConfigFile::from_json(r#"{"backbone": {"num_classes": 3}}"#).is_err());
    }
}
