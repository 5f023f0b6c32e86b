use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the segmentation proxy (cross-entropy plus Dice).
    pub seg: f64,
    pub part_contrast: f64,
    pub object_contrast: f64,
    pub logic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            part_contrast: 2.0,
            object_contrast: 2.0,
            logic: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.seg, self.part_contrast, self.object_contrast, self.logic];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Weighted sum of `(seg, part_contrast, object_contrast, logic)`.
    pub fn total(&self, seg: f64, part_contrast: f64, object_contrast: f64, logic: f64) -> f64 {
        self.seg * seg + self.part_contrast * part_contrast + self.object_contrast * object_contrast + self.logic * logic
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            warmup_steps: 100,
            peak_lr: 5e-4,
            weight_decay: 0.05,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps && self.steps > 0 {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds steps ({})",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate of 1-based step `step`: linear warmup from 0, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.peak_lr
        } else {
            self.peak_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Everything one training run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub contrast: ContrastConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.contrast.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}
