//! Run configuration: `model.*`, `loss.*`, `train.*` and `data.*` keys.

use serde::{Deserialize, Serialize};

use crate::autograd::ResizeMode;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::matching::CostWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Add,
    Multiply,
    ConcatConv,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Add, FusionMode::Multiply, FusionMode::ConcatConv];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Add => "add",
            FusionMode::Multiply => "multiply",
            FusionMode::ConcatConv => "concat_conv",
        }
    }
}

/// Spatial size the queries are resized to inside each cross-interaction block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UpsampleSize {
    /// Follow the encoder output size.
    #[default]
    #[serde(with = "dynamic_tag")]
    Dynamic,
    /// `[h, w]`; the encoder output is resized to match.
    Fixed([usize; 2]),
}

mod dynamic_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("dynamic")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "dynamic" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"dynamic\" or [h, w], got {s:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width `d` shared by the encoder output and the queries.
    pub hidden_dim: usize,
    pub num_queries: usize,
    /// `[w_q, h_q]`. A grid close to the input aspect ratio tends to work best.
    pub query_shape: [usize; 2],
    pub decoder_layers: usize,
    pub sim_kernel: usize,
    pub sim_blocks: usize,
    pub cim_kernel: usize,
    pub upsample_mode: ResizeMode,
    pub upsample_size: UpsampleSize,
    pub fusion_mode: FusionMode,
    pub aux_loss: bool,
    pub num_classes: usize,
    /// Output channels of the five stride-2 backbone stages.
    pub backbone_channels: Vec<usize>,
    pub stage_blocks: [usize; 3],
    pub stage_dims: [usize; 3],
    pub block_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used for training on synthetic shapes.
    pub fn toy() -> Self {
        ModelConfig {
            hidden_dim: 64,
            num_queries: 25,
            query_shape: [5, 5],
            decoder_layers: 3,
            sim_kernel: 9,
            sim_blocks: 1,
            cim_kernel: 9,
            upsample_mode: ResizeMode::Bilinear,
            upsample_size: UpsampleSize::Dynamic,
            fusion_mode: FusionMode::Add,
            aux_loss: true,
            num_classes: 3,
            backbone_channels: vec![16, 32, 48, 64, 96],
            stage_blocks: [1, 1, 1],
            stage_dims: [64, 96, 128],
            block_kernel: 7,
        }
    }

    /// Full-size layout: 100 queries on a 10x10 grid, six decoder layers,
    /// encoder stages of (2, 6, 2) blocks at (120, 240, 480) channels.
    pub fn paper() -> Self {
        ModelConfig {
            hidden_dim: 256,
            num_queries: 100,
            query_shape: [10, 10],
            decoder_layers: 6,
            sim_kernel: 9,
            sim_blocks: 1,
            cim_kernel: 9,
            upsample_mode: ResizeMode::Bilinear,
            upsample_size: UpsampleSize::Dynamic,
            fusion_mode: FusionMode::Add,
            aux_loss: true,
            num_classes: 80,
            backbone_channels: vec![64, 128, 256, 512, 1024],
            stage_blocks: [2, 6, 2],
            stage_dims: [120, 240, 480],
            block_kernel: 7,
        }
    }

    pub fn query_w(&self) -> usize {
        self.query_shape[0]
    }

    pub fn query_h(&self) -> usize {
        self.query_shape[1]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_queries != self.query_shape[0] * self.query_shape[1] {
            return err(format!(
                "model.num_queries = {} but query_shape {:?} holds {}",
                self.num_queries,
                self.query_shape,
                self.query_shape[0] * self.query_shape[1]
            ));
        }
        for (k, v) in [("sim_kernel", self.sim_kernel), ("cim_kernel", self.cim_kernel), ("block_kernel", self.block_kernel)] {
            if v % 2 == 0 {
                return err(format!("model.{k} must be odd, got {v}"));
            }
        }
        if self.backbone_channels.len() != 5 {
            return err(format!(
                "model.backbone_channels needs 5 entries (one per stride-2 stage), got {}",
                self.backbone_channels.len()
            ));
        }
        if self.decoder_layers == 0 || self.hidden_dim == 0 || self.num_classes == 0 {
            return err("model.decoder_layers, hidden_dim and num_classes must be positive".into());
        }
        if self.backbone_channels.contains(&0) || self.stage_dims.contains(&0) || self.sim_blocks == 0 {
            return err("model channel counts and sim_blocks must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Both learning rates are multiplied by 0.1 from this (0-based) epoch on.
    pub lr_drop_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Reuse the first batch for every step (overfit sanity mode).
    pub overfit_batch: bool,
    /// Step cap per epoch (0 = full pass).
    pub max_steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            epochs: 150,
            lr_drop_epoch: 100,
            batch_size: 8,
            seed: 0,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            overfit_batch: false,
            max_steps_per_epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: CostWeights,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

pub const SEED_ENV: &str = "DECO_SEED";

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// `DECO_SEED` overrides `train.seed`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.train.lr_drop_epoch > self.train.epochs {
            return Err(Error::Config(format!(
                "train.lr_drop_epoch ({}) exceeds train.epochs ({})",
                self.train.lr_drop_epoch, self.train.epochs
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.data.objects[1] > self.model.num_queries {
            return Err(Error::Config(format!(
                "data.objects max ({}) exceeds model.num_queries ({})",
                self.data.objects[1], self.model.num_queries
            )));
        }
        if self.data.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.num_classes ({}) differs from model.num_classes ({})",
                self.data.num_classes, self.model.num_classes
            )));
        }
        let [h, w] = self.data.image_size;
        if h < 32 || w < 32 {
            return Err(Error::Config(format!("data.image_size {h}x{w} is below the 32-pixel backbone minimum")));
        }
        Ok(())
    }
}
