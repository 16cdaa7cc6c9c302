//! Parameterized layers. Each layer only stores parameter ids; values live in
//! a [`ParamStore`].

use rand::Rng;

use crate::autograd::{ConvGeom, PadMode, Tape, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel: 1,
            stride: 1,
            groups: 1,
            bias: true,
        }
    }

    /// Same-size depthwise convolution with an odd kernel.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec {
            cin: channels,
            cout: channels,
            kernel,
            stride: 1,
            groups: channels,
            bias: true,
        }
    }

    pub fn strided(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride,
            groups: 1,
            bias: true,
        }
    }
}

impl Conv2d {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let cin_g = spec.cin / spec.groups.max(1);
        let bound = fan_in_bound(cin_g * spec.kernel * spec.kernel);
        let weight = store.add(
            format!("{name}.weight"),
            &[spec.cout, cin_g, spec.kernel, spec.kernel],
            Init::Uniform(bound),
            rng,
        )?;
        let bias = if spec.bias {
            Some(store.add(format!("{name}.bias"), &[spec.cout], Init::Uniform(bound), rng)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            geom: ConvGeom::new(spec.stride, (spec.kernel - 1) / 2, spec.groups),
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.geom)
    }

    pub fn set_pad_mode(&mut self, mode: PadMode) {
        self.geom.pad_mode = mode;
    }

    pub fn zero_init<T: Element>(&self, store: &mut ParamStore<T>) {
        zero_param(store, self.weight);
        if let Some(b) = self.bias {
            zero_param(store, b);
        }
    }
}

pub(crate) fn zero_param<T: Element>(store: &mut ParamStore<T>, id: ParamId) {
    let shape = store.get(id).tensor.shape().to_vec();
    store.set(id, Tensor::zeros(&shape)).expect("same shape");
}

/// Channels-first layer norm.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), &[channels], Init::Ones, rng)?,
            beta: store.add(format!("{name}.beta"), &[channels], Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, T::c(LAYER_NORM_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = fan_in_bound(din);
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), &[dout, din], Init::Uniform(bound), rng)?,
            bias: store.add(format!("{name}.bias"), &[dout], Init::Uniform(bound), rng)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn zero_init<T: Element>(&self, store: &mut ParamStore<T>) {
        zero_param(store, self.weight);
        zero_param(store, self.bias);
    }
}

/// Residual depthwise block: `x + pw2(gelu(pw1(norm(dw(x)))))` with a 4x
/// channel expansion.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub dw: Conv2d,
    pub norm: LayerNorm,
    pub pw1: Conv2d,
    pub pw2: Conv2d,
}

pub const EXPANSION: usize = 4;

impl ConvNextBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvNextBlock {
            dw: Conv2d::new(store, &format!("{name}.dw"), ConvSpec::depthwise(channels, kernel), rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels, rng)?,
            pw1: Conv2d::new(store, &format!("{name}.pw1"), ConvSpec::pointwise(channels, EXPANSION * channels), rng)?,
            pw2: Conv2d::new(store, &format!("{name}.pw2"), ConvSpec::pointwise(EXPANSION * channels, channels), rng)?,
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.dw.forward(tape, store, x)?;
        let h = self.norm.forward(tape, store, h)?;
        let h = self.pw1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.pw2.forward(tape, store, h)?;
        tape.add(x, h)
    }

    pub fn set_pad_mode(&mut self, mode: PadMode) {
        self.dw.set_pad_mode(mode);
    }
}
