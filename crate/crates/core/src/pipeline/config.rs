//! Pipeline configuration: one JSON document drives every stage.

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::forest::ForestConfig;
use crate::fusion::FinalClassifierConfig;
use crate::mil::TrainConfig;
use crate::pool::AttributionConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Per-modality training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityTrainConfigs {
    pub he: TrainConfig,
    pub ihc: TrainConfig,
    pub rec_he: TrainConfig,
}

impl Default for ModalityTrainConfigs {
    fn default() -> Self {
        let base = TrainConfig::default();
        ModalityTrainConfigs { he: base.clone(), ihc: base.clone(), rec_he: base }
    }
}

impl ModalityTrainConfigs {
    pub fn for_modality(&self, m: crate::data::Modality) -> &TrainConfig {
        match m {
            crate::data::Modality::He => &self.he,
            crate::data::Modality::Ihc => &self.ihc,
            crate::data::Modality::RecHe => &self.rec_he,
        }
    }
}

/// Pooling stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub k: usize,
    pub forest: ForestConfig,
    pub attribution: AttributionConfig,
    /// When true, attributions are computed on TEST embeddings (the
    /// leaky wiring); the default attributes on VAL.
    pub attribution_on_test: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            k: 32,
            forest: ForestConfig::default(),
            attribution: AttributionConfig::default(),
            attribution_on_test: false,
        }
    }
}

/// The whole pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub folds: usize,
    pub master_seed: u64,
    pub split_ratios: (f64, f64, f64),
    pub synth: SynthConfig,
    /// Hidden width of the bag network (the embedding length).
    pub mil_hidden: usize,
    /// Attention width of the bag network.
    pub mil_attention: usize,
    pub mil: ModalityTrainConfigs,
    pub pool: PoolConfig,
    pub final_head: FinalClassifierConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("out"),
            folds: 5,
            master_seed: 7,
            split_ratios: (0.8, 0.1, 0.1),
            synth: SynthConfig::default(),
            mil_hidden: 512,
            mil_attention: 128,
            mil: ModalityTrainConfigs::default(),
            pool: PoolConfig::default(),
            final_head: FinalClassifierConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 1 {
            return Err(Error::InvalidConfig("folds must be >= 1".into()));
        }
        self.synth.validate()?;
        self.mil.he.validate()?;
        self.mil.ihc.validate()?;
        self.mil.rec_he.validate()?;
        self.pool.forest.validate()?;
        self.final_head.forest.validate()?;
        self.final_head.mlp_train.validate()?;
        if self.pool.k == 0 || self.pool.k > self.mil_hidden {
            return Err(Error::InvalidConfig(format!(
                "pool k = {} out of range for embedding width {}",
                self.pool.k, self.mil_hidden
            )));
        }
        if self.mil_hidden % self.pool.k != 0 {
            return Err(Error::InvalidConfig(
                "window pooling baselines need k to divide the embedding width".into(),
            ));
        }
        let (a, b, c) = self.split_ratios;
        if !(a > 0.0) || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split ratios must be >= 0 and sum to 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: PipelineConfig = serde_json::from_str(&raw).map_err(|e| {
            Error::InvalidConfig(format!("cannot parse config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = PipelineConfig { folds: 2, master_seed: 99, ..Default::default() };
        cfg.save(&path).unwrap();
        let back = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn bad_pool_k_is_rejected() {
        let cfg = PipelineConfig {
            pool: PoolConfig { k: 100, ..Default::default() },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
