//! Run configuration, read from and echoed as sectioned TOML. Every key has
//! a default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::backbone::BackboneConfig;
use crate::data::augment::AugmentConfig;
use crate::distill::DistillWeights;
use crate::error::{Error, Result};
use crate::mam::MamConfig;
use crate::model::{LossConfig, ModelConfig, TaskLossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub stem: usize,
    pub channels: [usize; 4],
    pub strides: [usize; 4],
    pub blocks: [usize; 4],
    pub tconv_channels: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let m = ModelConfig::default();
        ModelSection {
            stem: b.stem,
            channels: b.channels,
            strides: b.strides,
            blocks: b.blocks,
            tconv_channels: m.tconv_channels,
            hidden: m.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamSection {
    /// Stages `1..=count` are gated.
    pub count: usize,
    pub layers: usize,
    pub kernel: usize,
    /// Hidden width; absent means equal to the stage channels.
    pub width: Option<usize>,
    pub depthwise: bool,
}

impl Default for MamSection {
    fn default() -> Self {
        let m = MamConfig::default();
        MamSection {
            count: 4,
            layers: m.layers,
            kernel: m.kernel,
            width: m.width,
            depthwise: m.depthwise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub enabled: bool,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            enabled: true,
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub main: f64,
    pub aux: f64,
    pub kl: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let t = TaskLossConfig::default();
        LossSection {
            main: t.main,
            aux: t.aux,
            kl: t.kl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// 1-based epochs after which the rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    /// Beam-decode dev every epoch instead of greedy.
    pub dev_beam: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainSection {
            lr: a.lr,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            batch_size: 2,
            epochs: 50,
            lr_drop_epochs: vec![30, 40],
            lr_drop_factor: 0.2,
            seed: 0,
            dev_beam: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub vocab: usize,
    /// Stored frame side; must match the dataset.
    pub resolution: usize,
    /// Model input side after cropping.
    pub crop: usize,
    pub flip_prob: f64,
    pub stretch_min: f64,
    pub stretch_max: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        DataSection {
            vocab: 10,
            resolution: 40,
            crop: a.crop,
            flip_prob: a.flip_prob,
            stretch_min: a.stretch_min,
            stretch_max: a.stretch_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { beam: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub mam: MamSection,
    pub distill: DistillSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub decode: DecodeSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().backbone.validate()?;
        self.loss_config().task.validate()?;
        if let Some(w) = self.loss_config().distill {
            w.validate()?;
        }
        self.augment_config().validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr = {} must be positive", t.lr)));
        }
        if !(t.weight_decay >= 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("train: invalid Adam hyperparameters".into()));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        if !(t.lr_drop_factor > 0.0 && t.lr_drop_factor <= 1.0) {
            return Err(Error::Config(format!("train.lr_drop_factor = {} outside (0, 1]", t.lr_drop_factor)));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be positive".into()));
        }
        if self.data.vocab < 1 {
            return Err(Error::Config("data.vocab must be positive".into()));
        }
        if self.data.crop > self.data.resolution {
            return Err(Error::Config(format!(
                "data.crop {} exceeds data.resolution {}",
                self.data.crop, self.data.resolution
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            backbone: BackboneConfig {
                stem: m.stem,
                channels: m.channels,
                strides: m.strides,
                blocks: m.blocks,
                resolution: self.data.crop,
                mam_count: self.mam.count,
                mam: MamConfig {
                    layers: self.mam.layers,
                    kernel: self.mam.kernel,
                    width: self.mam.width,
                    depthwise: self.mam.depthwise,
                },
            },
            tconv_channels: m.tconv_channels,
            hidden: m.hidden,
            vocab: self.data.vocab,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            task: TaskLossConfig {
                main: self.loss.main,
                aux: self.loss.aux,
                kl: self.loss.kl,
            },
            distill: self.distill.enabled.then_some(DistillWeights {
                alpha: self.distill.alpha,
                beta: self.distill.beta,
                lambda: self.distill.lambda,
            }),
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop: self.data.crop,
            flip_prob: self.data.flip_prob,
            stretch_min: self.data.stretch_min,
            stretch_max: self.data.stretch_max,
        }
    }

    /// Adam settings at the base rate; see [`RunConfig::lr_at`].
    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            weight_decay: self.train.weight_decay,
        }
    }

    /// Learning rate of 1-based `epoch`: one factor per drop epoch already passed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.train.lr_drop_epochs.iter().filter(|&&d| d < epoch).count();
        self.train.lr * self.train.lr_drop_factor.powi(drops as i32)
    }

    /// `--no-mam`.
    pub fn disable_mam(&mut self) {
        self.mam.count = 0;
    }

    /// `--no-distill`: zero weights and skip the terms.
    pub fn disable_distill(&mut self) {
        self.distill.enabled = false;
        self.distill.alpha = 0.0;
        self.distill.beta = 0.0;
        self.distill.lambda = 0.0;
    }
}
