use std::path::Path;

use nucleisam::dataio::DEFAULT_CROP_SIZE;
use nucleisam::model::{FreezePolicy, ModelConfig, Preset};
use nucleisam::pseudolabel::PseudoLabelParams;
use nucleisam::trainer::TrainConfig;
use nucleisam::{Error, Result};
use serde::{Deserialize, Serialize};

/// Settings shared by all commands, read from the `--config` TOML file.
/// Every section is optional.
///
/// ```toml
/// [model]
/// preset = "tiny"
/// # [model.geometry]  full ModelConfig, replaces the preset
///
/// [train]          # full TrainConfig for `finetune`
/// [pretrain]       # full TrainConfig for `finetune --pretrain`
///
/// [pseudolabel]
/// expand_ratio = 0.1
/// threshold = 0.5
///
/// [data]
/// crop_size = 200
/// train_count = 24
/// synth_count = 60
/// synth_size = 128
///
/// [service]
/// addr = "127.0.0.1:8080"
/// workers = 2
/// max_boxes = 2048
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelSection,
    pub train: Option<TrainConfig>,
    pub pretrain: Option<TrainConfig>,
    pub pseudolabel: PseudoLabelParams,
    pub data: DataSection,
    pub service: ServiceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Explicit geometry; overrides `preset` when present.
    pub geometry: Option<ModelConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { preset: Preset::Tiny, geometry: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Side of the square crops of the reduced-annotation regimes.
    pub crop_size: u32,
    /// Training-pool images assigned to train when no split file is given.
    pub train_count: usize,
    pub synth_count: usize,
    pub synth_size: u32,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { crop_size: DEFAULT_CROP_SIZE, train_count: 24, synth_count: 60, synth_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceSection {
    pub addr: String,
    /// Concurrent inference requests.
    pub workers: usize,
    pub max_boxes: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection { addr: "127.0.0.1:8080".into(), workers: 2, max_boxes: 2048 }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for t in cfg.train.iter().chain(&cfg.pretrain) {
            t.validate()?;
        }
        if let Some(g) = &cfg.model.geometry {
            g.validate()?;
        }
        if cfg.service.workers == 0 {
            return Err(Error::Config("service.workers must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.geometry.clone().unwrap_or_else(|| ModelConfig::preset(self.model.preset))
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }

    /// Settings for training the whole model with box prompts on complete labels.
    pub fn pretrain_config(&self) -> TrainConfig {
        self.pretrain.clone().unwrap_or_else(|| TrainConfig {
            max_epochs: 60,
            patience: 15,
            learning_rate: 1e-3,
            batch_size: 4,
            seeds: vec![0],
            freeze_policy: FreezePolicy::all_trainable(),
            reinit_trainable: false,
            box_prompts_per_image: 4,
            ..Default::default()
        })
    }
}
