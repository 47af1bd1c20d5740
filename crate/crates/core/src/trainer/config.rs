use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use crate::dataio::RegimeMode;
use crate::error::{Error, Result};
use crate::model::FreezePolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Rasterised ground-truth masks.
    Complete,
    /// Stored pseudo-labels generated from boxes.
    Weak,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::Complete => "complete",
            LabelSource::Weak => "weak",
        })
    }
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(LabelSource::Complete),
            "weak" => Ok(LabelSource::Weak),
            _ => Err(Error::Config(format!("unknown label source `{s}` (expected complete or weak)"))),
        }
    }
}

/// Training-run settings, read from TOML.
///
/// ```toml
/// label_source = "weak"
/// regime = "pct4"
/// max_epochs = 120
/// patience = 40
/// learning_rate = 2e-4
/// batch_size = 2
/// seeds = [0, 1, 2]
///
/// [loss_weights]
/// bce_weight = 1.0
/// iou_weight = 1.0
///
/// [freeze_policy]
/// trainable_groups = ["adapters", "mask_decoder"]
/// frozen_groups = ["encoder_backbone", "prompt_encoder"]
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub label_source: LabelSource,
    pub regime: RegimeMode,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub loss_weights: LossWeights,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub freeze_policy: FreezePolicy,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Random horizontal/vertical flips.
    #[serde(default = "default_true")]
    pub augment_flips: bool,
    /// Re-initialise the trainable groups from the run seed before training.
    #[serde(default = "default_true")]
    pub reinit_trainable: bool,
    /// Extra box-prompted samples per image and step (0 trains prompt-free only).
    #[serde(default)]
    pub box_prompts_per_image: usize,
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            label_source: LabelSource::Complete,
            regime: RegimeMode::Full,
            max_epochs: 120,
            patience: 40,
            learning_rate: 2e-4,
            batch_size: 2,
            loss_weights: LossWeights::default(),
            seeds: vec![0, 1, 2],
            freeze_policy: FreezePolicy::adapter_tuning(),
            weight_decay: default_weight_decay(),
            augment_flips: true,
            reinit_trainable: true,
            box_prompts_per_image: 0,
        }
    }
}

impl TrainConfig {
    /// Default epoch cap for the full preset.
    pub const FULL_MAX_EPOCHS: usize = 400;

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs < self.patience {
            return Err(Error::Config(format!(
                "max_epochs {} is below patience {}",
                self.max_epochs, self.patience
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let w = &self.loss_weights;
        if [w.bce_weight, w.iou_weight, w.quality_weight].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.freeze_policy.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let text = r#"
            label_source = "weak"
            regime = "pct4"
            max_epochs = 120
            patience = 40
            learning_rate = 2e-4
            batch_size = 2
            seeds = [0, 1, 2]

            [loss_weights]
            bce_weight = 1.0
            iou_weight = 1.0

            [freeze_policy]
            trainable_groups = ["adapters", "mask_decoder"]
            frozen_groups = ["encoder_backbone", "prompt_encoder"]
        "#;
        let cfg = TrainConfig::from_toml(text).unwrap();
        assert_eq!(cfg.label_source, LabelSource::Weak);
        assert_eq!(cfg.freeze_policy, FreezePolicy::adapter_tuning());
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invariants_enforced() {
        let mut c = TrainConfig::default();
        c.max_epochs = 10;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
        assert!(TrainConfig::from_toml("label_source = \"x\"").is_err());
    }
}
