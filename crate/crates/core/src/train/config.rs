//! Training configuration: a flat TOML file, every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BlockOptions;
use crate::data::Resolution;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Default,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub widths: Option<[usize; 4]>,
    pub depths: Option<[usize; 4]>,
    pub unified_channels: Option<usize>,
    pub low_channels: Option<usize>,
    pub head_channels: Option<usize>,
    /// Start the noise stream from a copy of the RGB stream weights.
    pub noise_init_from_rgb: bool,
    pub clip_len: usize,
    pub width: usize,
    pub height: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Cosine decay length in epochs; `None` spans both phases.
    pub cosine_epochs: Option<usize>,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub compressed_fraction: f64,
    pub crf: u32,
    pub seed: u64,
    pub deterministic: bool,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub val_fraction: f64,
    pub clips_per_video: usize,
    pub threshold: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda_focal: f64,
    pub lambda_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            preset: Preset::Default,
            widths: None,
            depths: None,
            unified_channels: None,
            low_channels: None,
            head_channels: None,
            noise_init_from_rgb: false,
            clip_len: 5,
            width: 432,
            height: 240,
            batch_size: 8,
            lr_initial: 5e-4,
            lr_final: 5e-6,
            cosine_epochs: None,
            phase1_epochs: 25,
            phase2_epochs: 5,
            compressed_fraction: 0.25,
            crf: 23,
            seed: 0,
            deterministic: false,
            weight_decay: 0.05,
            grad_clip: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.1,
            clips_per_video: 1,
            threshold: 0.5,
            focal_alpha: loss.alpha,
            focal_gamma: loss.gamma,
            lambda_focal: loss.lambda1,
            lambda_iou: loss.lambda2,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.preset {
            Preset::Default => ModelConfig::default(),
            Preset::Toy => ModelConfig::toy(),
        };
        ModelConfig {
            widths: self.widths.unwrap_or(base.widths),
            depths: self.depths.unwrap_or(base.depths),
            unified_channels: self.unified_channels.unwrap_or(base.unified_channels),
            low_channels: self.low_channels.unwrap_or(base.low_channels),
            head_channels: self.head_channels.unwrap_or(base.head_channels),
            clip_len: self.clip_len,
            block: BlockOptions::default(),
        }
    }

    pub fn resolution(&self) -> Resolution {
        Resolution {
            width: self.width,
            height: self.height,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
            lambda1: self.lambda_focal,
            lambda2: self.lambda_iou,
            ..LossConfig::default()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_config().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be positive".into());
        }
        if self.batch_size == 0 || self.clips_per_video == 0 {
            return bad("batch_size and clips_per_video must be >= 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_final >= 0.0 && self.lr_final <= self.lr_initial) {
            return bad(format!("learning rates {} -> {} invalid", self.lr_initial, self.lr_final));
        }
        if !(0.0..=1.0).contains(&self.compressed_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.crf > crate::data::compress::MAX_CRF {
            return bad(format!("crf {} outside [0, 51]", self.crf));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay, grad_clip and adam_eps must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert_eq!(c.total_epochs(), 30);
        assert_eq!(c.model_config(), ModelConfig::default());
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = TrainConfig::from_toml_str("preset = \"toy\"\nunified_channels = 24\nphase1_epochs = 3\n").unwrap();
        assert_eq!(c.model_config().unified_channels, 24);
        assert_eq!(c.model_config().widths, [16, 32, 48, 64]);
        assert_eq!(c.phase1_epochs, 3);
        assert!(TrainConfig::from_toml_str("learning_rate = 1.0").is_err());
        assert!(TrainConfig::from_toml_str("clip_len = 4").is_err());
    }
}
