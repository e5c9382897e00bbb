//! Run configuration: every hyperparameter of an experiment in one TOML file.
//!
//! Missing keys take their defaults and unknown keys are rejected. Each run
//! writes the fully resolved configuration next to its outputs, and running
//! again from that copy reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domains::CausalGraphParams;
use crate::error::{Error, Result};
use crate::stylization::AugmentParams;
use crate::training::{SelectionConfig, TrainSchedule};
use crate::vit::ViTConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: CausalGraphParams,
    pub target: CausalGraphParams,
    /// Samples drawn per domain before the train/test split.
    pub samples_per_domain: usize,
    pub train_fraction: f64,
    /// Number of leading training images expanded into style data.
    pub style_base_images: usize,
    /// Fraction of style base images held out for the style accuracy check.
    pub style_holdout_fraction: f64,
    pub augment: AugmentParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: CausalGraphParams { seed: 1, ..Default::default() },
            target: CausalGraphParams { seed: 2, ..Default::default() }.with_cyclic_pairing(1),
            samples_per_domain: 2000,
            train_fraction: 0.8,
            style_base_images: 200,
            style_holdout_fraction: 0.2,
            augment: AugmentParams::default(),
        }
    }
}

/// Settings swept by the ablation runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub task_epochs: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub families: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2, 3, 4],
            task_epochs: vec![1, 2, 3, 5],
            lambdas: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            families: vec![1, 3, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialisation, batching and augmentation.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub vit: ViTConfig,
    pub data: DataConfig,
    pub vendor: TrainSchedule,
    pub client: TrainSchedule,
    pub selection: SelectionConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            vit: ViTConfig { embed_dim: 32, ..Default::default() },
            data: DataConfig::default(),
            vendor: TrainSchedule {
                vendor_lr: 0.01,
                warm_start_epochs: 10,
                style_max_epochs_per_round: 4,
                ..Default::default()
            },
            client: TrainSchedule { rounds: 10, style_max_epochs_per_round: 4, ..Default::default() },
            selection: SelectionConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::MissingArtifact { path: path.to_path_buf(), hint: "configuration file not found".into() }
            }
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable as TOML")
    }

    /// Re-seed the run: the master seed and both domain generators.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.source.seed = seed.wrapping_mul(1000).wrapping_add(1);
        self.data.target.seed = seed.wrapping_mul(1000).wrapping_add(2);
        self.data.augment.seed = seed.wrapping_mul(1000).wrapping_add(7);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.data.source.validate()?;
        self.data.target.validate()?;
        self.data.augment.validate()?;
        self.vendor.validate()?;
        self.client.validate()?;
        let d = &self.data;
        if d.source.num_classes != self.vit.num_classes || d.target.num_classes != self.vit.num_classes {
            return Err(Error::Config(format!(
                "vit.num_classes {} disagrees with the domains ({} source, {} target)",
                self.vit.num_classes, d.source.num_classes, d.target.num_classes
            )));
        }
        if d.augment.num_style_labels() != self.vit.num_styles {
            return Err(Error::Config(format!(
                "vit.num_styles {} must equal 1 + augment.families ({})",
                self.vit.num_styles,
                d.augment.num_style_labels()
            )));
        }
        if self.vit.image_size != crate::domains::IMAGE_SIZE || self.vit.channels != crate::domains::CHANNELS {
            return Err(Error::Config("vit image geometry must match the synthetic domains (3×32×32)".into()));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !(d.style_holdout_fraction > 0.0 && d.style_holdout_fraction < 1.0) {
            return Err(Error::Config("style_holdout_fraction must lie in (0, 1)".into()));
        }
        let train = (d.samples_per_domain as f64 * d.train_fraction).floor() as usize;
        if train == 0 || train == d.samples_per_domain {
            return Err(Error::Config(format!("{} samples leave an empty train or test split", d.samples_per_domain)));
        }
        if d.style_base_images < 2 || d.style_base_images > train {
            return Err(Error::Config(format!(
                "style_base_images {} must lie in [2, {train}] (the training split)",
                d.style_base_images
            )));
        }
        if !(self.selection.lambda > 0.0 && self.selection.lambda < 1.0) {
            return Err(Error::Config(format!("selection.lambda {} must lie in (0, 1)", self.selection.lambda)));
        }
        if self.ablation.families.iter().any(|&f| f == 0 || f > crate::stylization::NUM_FAMILIES) {
            return Err(Error::Config("ablation.families entries must lie in 1..=5".into()));
        }
        Ok(())
    }
}
