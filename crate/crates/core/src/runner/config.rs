use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPipeline, PipelineMode};
use crate::encoder::{EncoderConfig, EncoderPreset};
use crate::error::{Error, Result};
use crate::jetdata::toy::ToySpec;
use crate::optim::{OptimizerConfig, DEFAULT_CLIP_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Supervised,
    SupervisedModified,
    Jetclr,
    Supcon,
    Mpm,
    ClipVae,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Supervised,
        Objective::SupervisedModified,
        Objective::Jetclr,
        Objective::Supcon,
        Objective::Mpm,
        Objective::ClipVae,
    ];

    pub fn is_pretraining(self) -> bool {
        !matches!(self, Objective::Supervised | Objective::SupervisedModified)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Supervised => "supervised",
            Objective::SupervisedModified => "supervised_modified",
            Objective::Jetclr => "jetclr",
            Objective::Supcon => "supcon",
            Objective::Mpm => "mpm",
            Objective::ClipVae => "clip_vae",
        }
    }

    /// Whether the objective runs on the modified backbone unless the config
    /// says otherwise.
    fn default_modified(self) -> bool {
        !matches!(self, Objective::Supervised)
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub preset: EncoderPreset,
    /// Use the modified backbone; defaults per objective.
    #[serde(default)]
    pub modified: Option<bool>,
}

/// Where the jets come from: a split manifest of jet files, or the toy
/// generator evaluated in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub toy: Option<ToySpec>,
    /// File-level train/val/test fractions for toy data.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Maximum particles per jet fed to the encoder.
    pub nmax: usize,
    /// Cap on validation jets read from the validation split.
    #[serde(default)]
    pub val_jets: Option<usize>,
    /// Cap on evaluation jets read from the requested split.
    #[serde(default)]
    pub eval_jets: Option<usize>,
}

/// Train/validation/test file fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epoch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Epochs of the from-scratch supervised runs; defaults to the sum of the
    /// pretraining and fine-tuning budgets.
    #[serde(default)]
    pub supervised_epochs: Option<usize>,
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

fn default_clip() -> f64 {
    DEFAULT_CLIP_NORM
}

impl TrainingConfig {
    /// 2M-jet epochs, 50 pretraining and 20 fine-tuning epochs, batch 256.
    pub fn paper() -> Self {
        Self {
            epoch_size: 2_000_000,
            pretrain_epochs: 50,
            finetune_epochs: 20,
            supervised_epochs: None,
            batch_size: 256,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }

    /// 27k-jet epochs, 5 pretraining and 3 fine-tuning epochs, batch 64.
    pub fn desk() -> Self {
        Self {
            epoch_size: 27_000,
            pretrain_epochs: 5,
            finetune_epochs: 3,
            supervised_epochs: None,
            batch_size: 64,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }

    pub fn supervised_epochs(&self) -> usize {
        self.supervised_epochs.unwrap_or(self.pretrain_epochs + self.finetune_epochs)
    }
}

/// Training and validation augmentation for the contrastive objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub train: AugmentationPipeline,
    pub val: AugmentationPipeline,
}

impl AugmentationConfig {
    pub fn default_for(objective: Objective, nmax: usize) -> Self {
        let (train, val) = match objective {
            Objective::Supcon => (
                AugmentationPipeline::default_for(PipelineMode::SupconTrain),
                AugmentationPipeline::default_for(PipelineMode::SupconVal),
            ),
            _ => (
                AugmentationPipeline::default_for(PipelineMode::Jetclr),
                AugmentationPipeline::default_for(PipelineMode::Jetclr),
            ),
        };
        Self {
            train: AugmentationPipeline { nmax, ..train },
            val: AugmentationPipeline { nmax, ..val },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for checkpoints and run records; nothing is written when
    /// absent.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub objective: Objective,
    pub seed: u64,
    pub encoder: EncoderSection,
    pub data: DataConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augmentation: Option<AugmentationConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Paper-scale settings on the published architecture.
    pub fn paper(objective: Objective, data: DataConfig) -> Self {
        Self {
            objective,
            seed: 0,
            encoder: EncoderSection {
                preset: EncoderPreset::Paper,
                modified: None,
            },
            data,
            training: TrainingConfig::paper(),
            optimizer: OptimizerConfig::default(),
            augmentation: None,
            output: OutputConfig::default(),
        }
    }

    /// Desk-scale settings: reduced epochs on the desk backbone, Nmax 64.
    pub fn desk(objective: Objective, data: DataConfig) -> Self {
        let mut cfg = Self::paper(objective, data);
        cfg.encoder.preset = EncoderPreset::Desk;
        cfg.training = TrainingConfig::desk();
        cfg.data.nmax = 64;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        if let (Some(m), Some(dir)) = (cfg.data.manifest.as_mut(), path.parent()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.manifest.is_some() == d.toy.is_some() {
            return Err(Error::Config("data needs exactly one of manifest or toy".into()));
        }
        if d.nmax == 0 {
            return Err(Error::Config("data.nmax must be positive".into()));
        }
        if d.split.iter().any(|&r| !(r >= 0.0)) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.split {:?} must be non-negative and sum to 1", d.split)));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.epoch_size == 0 {
            return Err(Error::Config("batch_size and epoch_size must be positive".into()));
        }
        if self.objective.is_pretraining() && t.pretrain_epochs == 0 {
            return Err(Error::Config("pretraining objectives need pretrain_epochs > 0".into()));
        }
        if !(t.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be positive", t.clip_norm)));
        }
        if let Some(a) = &self.augmentation {
            a.train.validate()?;
            a.val.validate()?;
        }
        self.encoder_config().validate()
    }

    pub fn modified(&self) -> bool {
        self.encoder.modified.unwrap_or(self.objective.default_modified())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let base = EncoderConfig::preset(self.encoder.preset);
        let base = if self.modified() { base.modified() } else { base };
        EncoderConfig {
            max_particles: self.data.nmax,
            ..base
        }
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        self.augmentation
            .clone()
            .unwrap_or_else(|| AugmentationConfig::default_for(self.objective, self.data.nmax))
    }
}
