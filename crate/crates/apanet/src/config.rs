//! Run configuration, loadable from TOML or JSON.

use std::path::{Path, PathBuf};

use apanet_core::backbone::BackboneConfig;
use apanet_core::data::{ClassSplit, EpisodeConfig};
use apanet_core::head::{MethodConfig, OptimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub num_folds: usize,
    pub fold: usize,
    pub image_size: usize,
    pub bias_rate: f64,
    pub distractor_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { num_classes: 8, num_folds: 4, fold: 0, image_size: 32, bias_rate: 0.75, distractor_rate: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: [usize; 4],
    pub stride: usize,
    pub head_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        Self { widths: bb.widths, stride: bb.stride, head_width: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    pub k_shot_train: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.0025, momentum: 0.9, batch: 1, seed: 0, k_shot_train: 1, checkpoint_every: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub k_shot: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 200, k_shot: 1, seed: 1_000_003 }
    }
}

/// Everything a run depends on. A run is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub method: MethodConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.split()?;
        self.backbone().validate()?;
        let m = &self.method;
        if !(0.0..=1.0).contains(&m.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", m.lambda)));
        }
        if m.kmeans_iters == 0 {
            return Err(Error::Config("kmeans_iters must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.bias_rate) {
            return Err(Error::Config("bias_rate must lie in [0, 1]".into()));
        }
        if self.training.batch == 0 || self.training.k_shot_train == 0 || self.eval.k_shot == 0 {
            return Err(Error::Config("batch and shot counts must be positive".into()));
        }
        if self.model.head_width == 0 {
            return Err(Error::Config("head_width must be positive".into()));
        }
        Ok(())
    }

    pub fn split(&self) -> Result<ClassSplit> {
        Ok(ClassSplit::new(self.dataset.num_classes, self.dataset.fold, self.dataset.num_folds)?)
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            height: self.dataset.image_size,
            width: self.dataset.image_size,
            widths: self.model.widths,
            stride: self.model.stride,
        }
    }

    pub fn episodes(&self, k_shot: usize) -> EpisodeConfig {
        EpisodeConfig {
            height: self.dataset.image_size,
            width: self.dataset.image_size,
            feature_stride: self.model.stride,
            k_shot,
            bias_rate: self.dataset.bias_rate,
            distractor_rate: self.dataset.distractor_rate,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig { lr: self.training.lr, momentum: self.training.momentum }
    }

    /// Hash of every setting that shapes the training trajectory. Step count,
    /// checkpoint cadence, evaluation settings, and the output directory are
    /// excluded so a run can be extended or re-evaluated.
    pub fn fingerprint(&self) -> String {
        let mut training = self.training.clone();
        training.steps = 0;
        training.checkpoint_every = 0;
        let value = serde_json::json!({
            "dataset": self.dataset,
            "model": self.model,
            "method": self.method,
            "training": training,
        });
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.method.lambda, 0.5);
        assert_eq!(cfg.method.clusters, 3);
        assert_eq!(cfg.method.kmeans_iters, 10);
        assert_eq!(cfg.method.partition, apanet_core::head::PartitionStrategy::KMeans);
        assert_eq!(cfg.method.source, apanet_core::head::PrototypeSource::Query);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_fingerprint_scope() {
        let mut cfg = RunConfig::default();
        cfg.method.partition = apanet_core::head::PartitionStrategy::Spp { level: 3 };
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let mut longer = cfg.clone();
        longer.training.steps += 100;
        longer.eval.episodes = 7;
        assert_eq!(longer.fingerprint(), cfg.fingerprint());
        let mut other = cfg.clone();
        other.method.lambda = 0.3;
        assert_ne!(other.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg: RunConfig = toml::from_str("[method]\nlambda = 0.0\n").unwrap();
        assert_eq!(cfg.method.lambda, 0.0);
        assert_eq!(cfg.method.clusters, 3);
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }
}
