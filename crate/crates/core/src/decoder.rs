//! Query-grid decoder: self-interaction blocks, cross-interaction blocks and
//! the detection head.

use rand::Rng;

use crate::autograd::{PadMode, ResizeMode, Tape, Var};
use crate::config::{FusionMode, ModelConfig, UpsampleSize};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvNextBlock, ConvSpec, LayerNorm, Linear, EXPANSION};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const QUERY_INIT_STD: f64 = 0.02;

/// Register the learned `[d, h_q, w_q]` query grid. Queries are numbered
/// row-major over the grid; that order is the slot id everywhere downstream.
pub fn init_queries<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    n: usize,
    w_q: usize,
    h_q: usize,
    d: usize,
    rng: &mut R,
) -> Result<ParamId> {
    if n != w_q * h_q {
        return Err(Error::invalid(
            "init_queries",
            format!("{n} queries cannot fill a {w_q}x{h_q} grid ({} cells)", w_q * h_q),
        ));
    }
    store.add("decoder.queries".to_string(), &[d, h_q, w_q], Init::Normal(QUERY_INIT_STD), rng)
}

/// Shapes seen inside one cross-interaction block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CimTrace {
    /// Encoder output `[d, H, W]`.
    pub feature: [usize; 3],
    /// The resized queries and everything up to the pool.
    pub internal: [usize; 3],
    /// Pooled output, back on the query grid.
    pub output: [usize; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub cim: Vec<CimTrace>,
}

fn dims3<T: Element>(tape: &Tape<T>, v: Var) -> [usize; 3] {
    let s = tape.shape(v);
    [s[0], s[1], s[2]]
}

/// Resize queries onto the feature map, fuse, mix with a depthwise conv,
/// apply a residual FFN, and max-pool back onto the query grid.
pub struct CimBlock {
    fusion: FusionMode,
    fuse_conv: Option<Conv2d>,
    dw: Conv2d,
    ffn1: Conv2d,
    ffn2: Conv2d,
    upsample_mode: ResizeMode,
    upsample_size: UpsampleSize,
    dim: usize,
}

impl CimBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.hidden_dim;
        let fuse_conv = match cfg.fusion_mode {
            FusionMode::ConcatConv => Some(Conv2d::new(store, &format!("{name}.fuse"), ConvSpec::pointwise(2 * d, d), rng)?),
            _ => None,
        };
        Ok(CimBlock {
            fusion: cfg.fusion_mode,
            fuse_conv,
            dw: Conv2d::new(store, &format!("{name}.dw"), ConvSpec::depthwise(d, cfg.cim_kernel), rng)?,
            ffn1: Conv2d::new(store, &format!("{name}.ffn1"), ConvSpec::pointwise(d, EXPANSION * d), rng)?,
            ffn2: Conv2d::new(store, &format!("{name}.ffn2"), ConvSpec::pointwise(EXPANSION * d, d), rng)?,
            upsample_mode: cfg.upsample_mode,
            upsample_size: cfg.upsample_size,
            dim: d,
        })
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q: Var,
        z_e: Var,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let [d, h_q, w_q] = dims3(tape, q);
        let feature = dims3(tape, z_e);
        if d != self.dim || feature[0] != self.dim {
            return Err(Error::shape("cim_block", "channels", self.dim, [d, feature[0]]));
        }
        let (h, w) = match self.upsample_size {
            UpsampleSize::Dynamic => (feature[1], feature[2]),
            UpsampleSize::Fixed([h, w]) => (h, w),
        };
        let o_hat = tape.resize(q, h, w, self.upsample_mode)?;
        let z = if (h, w) == (feature[1], feature[2]) {
            z_e
        } else {
            tape.resize(z_e, h, w, self.upsample_mode)?
        };
        let fused = match self.fusion {
            FusionMode::Add => tape.add(o_hat, z)?,
            FusionMode::Multiply => tape.mul(o_hat, z)?,
            FusionMode::ConcatConv => {
                let cat = tape.concat(o_hat, z)?;
                self.fuse_conv.as_ref().expect("built for concat_conv").forward(tape, store, cat)?
            }
        };
        let mixed = self.dw.forward(tape, store, fused)?;
        let o_f = tape.add(o_hat, mixed)?;
        let hidden = self.ffn1.forward(tape, store, o_f)?;
        let hidden = tape.gelu(hidden);
        let hidden = self.ffn2.forward(tape, store, hidden)?;
        let pre_pool = tape.add(o_f, hidden)?;
        let out = tape.adaptive_max_pool_to(pre_pool, h_q, w_q)?;
        trace.cim.push(CimTrace {
            feature,
            internal: dims3(tape, pre_pool),
            output: dims3(tape, out),
        });
        Ok(out)
    }

    /// Zero the depthwise conv and the FFN output conv.
    pub fn zero_residual_branches<T: Element>(&self, store: &mut ParamStore<T>) {
        self.dw.zero_init(store);
        self.ffn2.zero_init(store);
    }
}

pub struct DecoderLayer {
    pub sim: Vec<ConvNextBlock>,
    pub cim: CimBlock,
}

/// Class logits `[N, K+1]` and sigmoid boxes `[N, 4]` (cx, cy, w, h) on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DetectionVars {
    pub logits: Var,
    pub boxes: Var,
}

/// Concrete per-image predictions: always exactly N rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet<T: Element = f32> {
    pub logits: Tensor<T>,
    pub boxes: Tensor<T>,
}

impl<T: Element> DetectionSet<T> {
    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1] - 1
    }

    /// Box `i` as `[cx, cy, w, h]`.
    pub fn bbox(&self, i: usize) -> [T; 4] {
        let b = &self.boxes.data()[4 * i..4 * i + 4];
        [b[0], b[1], b[2], b[3]]
    }

    /// Softmax over the K+1 logits of row `i`.
    pub fn probs(&self, i: usize) -> Vec<f64> {
        let k1 = self.logits.shape()[1];
        let row = &self.logits.data()[i * k1..(i + 1) * k1];
        let m = row.iter().map(|v| v.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.to_f64().unwrap() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Best real class and its probability for row `i`.
    pub fn top_class(&self, i: usize) -> (usize, f64) {
        let p = self.probs(i);
        let k = p.len() - 1;
        p[..k]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best })
    }
}

/// Shared LayerNorm, then a linear class branch and a 3-layer box MLP.
pub struct Head {
    norm: LayerNorm,
    class: Linear,
    box_mlp: [Linear; 3],
}

impl Head {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Head {
            norm: LayerNorm::new(store, "head.norm", d, rng)?,
            class: Linear::new(store, "head.class", d, num_classes + 1, rng)?,
            box_mlp: [
                Linear::new(store, "head.box0", d, d, rng)?,
                Linear::new(store, "head.box1", d, d, rng)?,
                Linear::new(store, "head.box2", d, 4, rng)?,
            ],
        })
    }

    /// `[d, h_q, w_q]` grid -> N predictions in row-major slot order.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, q: Var) -> Result<DetectionVars> {
        let [d, h_q, w_q] = dims3(tape, q);
        let x = self.norm.forward(tape, store, q)?;
        let x = tape.reshape(x, &[d, h_q * w_q])?;
        let rows = tape.transpose(x)?;
        let logits = self.class.forward(tape, store, rows)?;
        let mut b = self.box_mlp[0].forward(tape, store, rows)?;
        b = tape.gelu(b);
        b = self.box_mlp[1].forward(tape, store, b)?;
        b = tape.gelu(b);
        b = self.box_mlp[2].forward(tape, store, b)?;
        let boxes = tape.sigmoid(b);
        Ok(DetectionVars { logits, boxes })
    }

    pub fn zero_box_branch<T: Element>(&self, store: &mut ParamStore<T>) {
        for l in &self.box_mlp {
            l.zero_init(store);
        }
    }
}

/// Query grid, `L` layers of (SIM blocks, CIM), and a head applied after
/// every layer.
pub struct Decoder {
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub head: Head,
}

impl Decoder {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden_dim;
        let queries = init_queries(store, cfg.num_queries, cfg.query_w(), cfg.query_h(), d, rng)?;
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let sim = (0..cfg.sim_blocks)
                .map(|b| ConvNextBlock::new(store, &format!("decoder.layer{l}.sim{b}"), d, cfg.sim_kernel, rng))
                .collect::<Result<_>>()?;
            let cim = CimBlock::new(store, &format!("decoder.layer{l}.cim"), cfg, rng)?;
            layers.push(DecoderLayer { sim, cim });
        }
        let head = Head::new(store, d, cfg.num_classes, rng)?;
        Ok(Decoder { queries, layers, head })
    }

    /// One [`DetectionVars`] per layer; the last entry is the final prediction.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z_e: Var,
        trace: &mut ForwardTrace,
    ) -> Result<Vec<DetectionVars>> {
        let mut q = tape.param(store, self.queries);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            for b in &layer.sim {
                q = b.forward(tape, store, q)?;
            }
            q = layer.cim.forward(tape, store, q, z_e, trace)?;
            out.push(self.head.forward(tape, store, q)?);
        }
        Ok(out)
    }

    pub fn set_pad_mode(&mut self, mode: PadMode) {
        for l in &mut self.layers {
            for b in &mut l.sim {
                b.set_pad_mode(mode);
            }
        }
    }

    pub fn zero_residual_branches<T: Element>(&self, store: &mut ParamStore<T>) {
        for l in &self.layers {
            for b in &l.sim {
                b.pw2.zero_init(store);
            }
            l.cim.zero_residual_branches(store);
        }
    }
}
