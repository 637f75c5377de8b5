use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ArchConfig;

/// Which class label drives patch rescaling during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Ground-truth labels; the classifier only learns from its own loss.
    #[default]
    GtLabels,
    /// The classifier's current arg-max.
    PredictedLabels,
}

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub val_fraction: f64,
    pub seed: u64,
    pub arch: ArchConfig,
    pub routing_mode: RoutingMode,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub loss_weights: LossWeights,
    /// Stop classifier and attention gradients at their taps into the trunk.
    pub detach_aux_heads: bool,
    /// Head-disk radius for attention targets; defaults to `8 · input_size / 256`.
    pub seg_radius: Option<f64>,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    /// Random crops drawn from the training images (doubled by flipping).
    pub n_patches: usize,
    /// Crop sides before resizing to the input size.
    pub crop_sizes: Vec<usize>,
    /// Run validation every this many epochs (and after the last).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 16,
            base_lr: 0.001,
            lr_halving_period: 30,
            weight_decay: 1e-4,
            momentum: 0.9,
            nesterov: true,
            val_fraction: 0.1,
            seed: 0,
            arch: ArchConfig::default(),
            routing_mode: RoutingMode::GtLabels,
            max_steps: None,
            loss_weights: LossWeights::default(),
            detach_aux_heads: false,
            seg_radius: None,
            grad_clip: None,
            n_patches: 1000,
            crop_sizes: vec![128, 256, 512],
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.lr_halving_period == 0 || self.validate_every == 0 {
            return bad("batch_size, lr_halving_period and validate_every must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("weight_decay must be non-negative and momentum in [0, 1)".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.crop_sizes.is_empty() || self.crop_sizes.contains(&0) {
            return bad("crop_sizes must be nonempty and positive".into());
        }
        if matches!(self.seg_radius, Some(r) if r.is_nan() || r < 0.0)
            || matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0)
        {
            return bad("seg_radius must be non-negative and grad_clip positive".into());
        }
        Ok(())
    }

    pub fn seg_radius(&self) -> f64 {
        self.seg_radius
            .unwrap_or(8.0 * self.arch.input_size as f64 / 256.0)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    /// Settings for memorizing a few dozen tiny synthetic patches.
    pub fn tiny_overfit() -> Self {
        TrainConfig {
            epochs: 75,
            batch_size: 16,
            base_lr: 0.02,
            lr_halving_period: 20,
            weight_decay: 0.0,
            arch: ArchConfig::tiny(),
            loss_weights: LossWeights {
                ch: 3.0,
                ..LossWeights::default()
            },
            grad_clip: Some(10.0),
            n_patches: 32,
            crop_sizes: vec![64],
            ..TrainConfig::default()
        }
    }
}

/// `base_lr · 0.5^⌊epoch / lr_halving_period⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = epoch / cfg.lr_halving_period;
    if halvings >= 1100 {
        return 0.0;
    }
    cfg.base_lr * 0.5f64.powi(halvings as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(30, &cfg), 0.0005);
        assert_eq!(lr_at(119, &cfg), 0.000125);
    }

    #[test]
    fn toml_overrides_and_rejects() {
        let cfg =
            TrainConfig::from_toml_str("epochs = 3\n[arch]\nbase_channels = 4\ninput_size = 64\n")
                .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.arch.base_channels, 4);
        assert_eq!(cfg.batch_size, 16);
        assert!(TrainConfig::from_toml_str("epoch = 3").is_err());
        assert!(TrainConfig::from_toml_str("val_fraction = 1.0").is_err());
    }
}
