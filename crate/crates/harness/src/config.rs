//! Run configuration, read from a versioned TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use v2v_core::channel::FlatChannelConfig;
use v2v_core::perception::SceneConfig;
use v2v_core::transport::Link;
use v2v_core::weighting::SelfSupervisedParams;
use v2v_nn::{AdamConfig, LossParams};

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

/// Supervised training of the perception backbone (schemes 1 and 2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// SNR of the flat Rician link used by scheme 2
    pub scheme2_snr_db: f64,
    pub rician_k: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub beta_reg: f64,
    pub beta_cls: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let loss = LossParams::default();
        TrainingConfig {
            epochs: 20,
            batch_scenes: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            scheme2_snr_db: 15.0,
            rician_k: 1.0,
            focal_alpha: loss.alpha,
            focal_gamma: loss.gamma,
            beta_reg: loss.beta_reg,
            beta_cls: loss.beta_cls,
        }
    }
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn loss(&self) -> LossParams {
        LossParams {
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
            beta_reg: self.beta_reg,
            beta_cls: self.beta_cls,
        }
    }

    /// Link the shared features pass during scheme-2 training.
    pub fn scheme2_link(&self) -> Link {
        Link::Flat(FlatChannelConfig::rician(self.rician_k, self.scheme2_snr_db))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// channel realizations per scene and channel point
    pub draws_per_scene: usize,
    pub rician_k: f64,
    /// SNR at the reference distance for the path-loss sweep
    pub pathloss_snr_db: f64,
    pub p0: f64,
    /// CSI perturbation variance for the path-loss sweep
    pub csi_variance: f64,
    /// SNR of the pilot sweep
    pub pilots_snr_db: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            draws_per_scene: 5,
            rician_k: 1.0,
            pathloss_snr_db: 30.0,
            p0: 1.0,
            csi_variance: 0.1,
            pilots_snr_db: 30.0,
            score_threshold: 0.05,
            nms_iou: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub scene: SceneConfig,
    pub training: TrainingConfig,
    pub weighting: SelfSupervisedParams,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            scene: SceneConfig::default(),
            training: TrainingConfig::default(),
            weighting: SelfSupervisedParams::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.scene.validate()?;
        self.weighting.validate()?;
        if self.training.loss().validate().is_err() {
            return bad("invalid loss parameters");
        }
        if self.dataset.train == 0 || self.dataset.test == 0 {
            return bad("train and test scene counts must be positive");
        }
        if self.training.batch_scenes == 0 || !(self.training.lr > 0.0) {
            return bad("batch_scenes and lr must be positive");
        }
        if self.evaluation.draws_per_scene == 0 {
            return bad("draws_per_scene must be positive");
        }
        if !(self.evaluation.csi_variance >= 0.0) || !(self.evaluation.p0 > 0.0) {
            return bad("csi_variance must be nonnegative and p0 positive");
        }
        if self.scene.raster_size != v2v_core::perception::model::RASTER_SIZE {
            return bad("the encoder expects 64x64 rasters");
        }
        Ok(())
    }
}
