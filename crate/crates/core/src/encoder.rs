//! Strided convolutional backbone and the depthwise-block encoder.

use rand::Rng;

use crate::autograd::{PadMode, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvNextBlock, ConvSpec, LayerNorm};
use crate::params::ParamStore;
use crate::tensor::Element;

pub const BACKBONE_STRIDE: usize = 32;
pub const MIN_IMAGE_SIDE: usize = 32;

/// A `[C, H, W]` activation on the tape with its stride relative to the
/// input image.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

/// Encoder layout, split out of [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub backbone_channels: Vec<usize>,
    pub proj_dim: usize,
    pub stage_blocks: [usize; 3],
    pub stage_dims: [usize; 3],
    pub block_kernel: usize,
}

impl From<&ModelConfig> for EncoderConfig {
    fn from(m: &ModelConfig) -> Self {
        EncoderConfig {
            backbone_channels: m.backbone_channels.clone(),
            proj_dim: m.hidden_dim,
            stage_blocks: m.stage_blocks,
            stage_dims: m.stage_dims,
            block_kernel: m.block_kernel,
        }
    }
}

struct DownStage {
    conv: Conv2d,
    norm: LayerNorm,
}

/// Five 3x3 stride-2 stages, each conv -> LayerNorm -> GELU. Padding 1
/// rounds odd sizes up, so the output is `ceil(H0/32) x ceil(W0/32)`.
pub struct Backbone {
    stages: Vec<DownStage>,
    out_channels: usize,
}

impl Backbone {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, channels: &[usize], rng: &mut R) -> Result<Self> {
        let mut stages = Vec::with_capacity(channels.len());
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            let name = format!("backbone.{i}");
            stages.push(DownStage {
                conv: Conv2d::new(store, &format!("{name}.conv"), ConvSpec::strided(cin, cout, 3, 2), rng)?,
                norm: LayerNorm::new(store, &format!("{name}.norm"), cout, rng)?,
            });
            cin = cout;
        }
        Ok(Backbone { stages, out_channels: cin })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<FeatureMap> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape("backbone", "image [3, H0, W0]", "[3, H0, W0]", &shape));
        }
        if shape[1] < MIN_IMAGE_SIDE || shape[2] < MIN_IMAGE_SIDE {
            return Err(Error::invalid(
                "backbone",
                format!("image {}x{} is smaller than {MIN_IMAGE_SIDE} in some dim", shape[1], shape[2]),
            ));
        }
        let mut x = image;
        for s in &self.stages {
            x = s.conv.forward(tape, store, x)?;
            x = s.norm.forward(tape, store, x)?;
            x = tape.gelu(x);
        }
        Ok(FeatureMap {
            var: x,
            stride: 1 << self.stages.len(),
        })
    }
}

/// LayerNorm followed by a 1x1 conv; used wherever the channel count changes.
pub struct Projection {
    norm: Option<LayerNorm>,
    conv: Conv2d,
}

impl Projection {
    fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        normed: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Projection {
            norm: if normed {
                Some(LayerNorm::new(store, &format!("{name}.norm"), cin, rng)?)
            } else {
                None
            },
            conv: Conv2d::new(store, &format!("{name}.conv"), ConvSpec::pointwise(cin, cout), rng)?,
        })
    }

    fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let x = match &self.norm {
            Some(n) => n.forward(tape, store, x)?,
            None => x,
        };
        self.conv.forward(tape, store, x)
    }
}

struct Stage {
    transition: Option<Projection>,
    blocks: Vec<ConvNextBlock>,
}

/// Input projection `C -> d`, three stages of residual depthwise blocks at
/// constant resolution, and a final projection back to `d`. No positional
/// encoding anywhere.
pub struct Encoder {
    input_proj: Projection,
    stages: Vec<Stage>,
    output_proj: Projection,
    dim: usize,
    stage_dims: [usize; 3],
}

impl Encoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let input_proj = Projection::new(store, "encoder.input_proj", in_channels, cfg.proj_dim, false, rng)?;
        let mut stages = Vec::with_capacity(3);
        let mut c = cfg.proj_dim;
        for (i, (&blocks, &dim)) in cfg.stage_blocks.iter().zip(&cfg.stage_dims).enumerate() {
            let transition = if dim != c {
                Some(Projection::new(store, &format!("encoder.stage{i}.transition"), c, dim, true, rng)?)
            } else {
                None
            };
            let blocks = (0..blocks)
                .map(|b| ConvNextBlock::new(store, &format!("encoder.stage{i}.block{b}"), dim, cfg.block_kernel, rng))
                .collect::<Result<_>>()?;
            stages.push(Stage { transition, blocks });
            c = dim;
        }
        let output_proj = Projection::new(store, "encoder.output_proj", c, cfg.proj_dim, true, rng)?;
        Ok(Encoder {
            input_proj,
            stages,
            output_proj,
            dim: cfg.proj_dim,
            stage_dims: cfg.stage_dims,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `f [C, H, W]` -> `z0 [d, H, W]`.
    pub fn project<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: FeatureMap) -> Result<FeatureMap> {
        Ok(FeatureMap {
            var: self.input_proj.forward(tape, store, f.var)?,
            stride: f.stride,
        })
    }

    /// `z0 [d, H, W]` -> `z_e [d, H, W]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z0: FeatureMap) -> Result<FeatureMap> {
        let c = tape.shape(z0.var)[0];
        if c != self.dim {
            return Err(Error::shape("encoder", "channels", self.dim, c));
        }
        let mut x = z0.var;
        for s in &self.stages {
            if let Some(t) = &s.transition {
                x = t.forward(tape, store, x)?;
            }
            for b in &s.blocks {
                x = b.forward(tape, store, x)?;
            }
        }
        Ok(FeatureMap {
            var: self.output_proj.forward(tape, store, x)?,
            stride: z0.stride,
        })
    }

    /// Switch every spatial convolution to `mode` (circular padding exists
    /// for equivariance tests).
    pub fn set_pad_mode(&mut self, mode: PadMode) {
        for s in &mut self.stages {
            for b in &mut s.blocks {
                b.set_pad_mode(mode);
            }
        }
    }

    /// Zero the last conv of every residual branch.
    pub fn zero_residual_branches<T: Element>(&self, store: &mut ParamStore<T>) {
        for s in &self.stages {
            for b in &s.blocks {
                b.pw2.zero_init(store);
            }
        }
    }

    /// Channel count after the input projection, each stage, and the output
    /// projection.
    pub fn channel_trace(&self) -> Vec<usize> {
        let mut t = vec![self.dim];
        t.extend(self.stage_dims);
        t.push(self.dim);
        t
    }
}
