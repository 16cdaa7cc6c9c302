use std::collections::HashMap;

use super::boxloss::giou_term;
use super::conv::{self, ConvDims, ConvGeom};
use super::kernels::{self, ResizeMode};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        dims: ConvDims,
        batch: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        c: usize,
        s: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Resize {
        input: Var,
        dims: [usize; 3],
        oh: usize,
        ow: usize,
        mode: ResizeMode,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Var, Var),
    Reshape(Var),
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        row_scale: Vec<T>,
        probs: Vec<T>,
        k: usize,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
    },
    Giou {
        pred: Var,
        grads: Vec<[T; 4]>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Resize { .. } => "resize",
            Op::MaxPool { .. } => "adaptive_max_pool",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "softmax_xent",
            Op::L1 { .. } => "l1_loss",
            Op::Giou { .. } => "giou_loss",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of forward ops. Values live on the tape; [`Tape::backward`]
/// walks it once in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    kink_margin: Option<T>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(op, "rank", rank, shape.len()));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            kink_margin: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "{} produced a non-finite value",
            op.name()
        );
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn note_kink(&mut self, gap: T) {
        self.kink_margin = Some(self.kink_margin.map_or(gap, |m| m.min(gap)));
    }

    /// Smallest observed distance to a non-differentiable point (pool ties,
    /// box-edge crossings); `None` if no such op ran.
    pub fn kink_margin(&self) -> Option<T> {
        self.kink_margin
    }

    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    /// Records a parameter as a leaf. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).tensor.clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("tape shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let (batch, chw) = match ishape.len() {
            3 => (1, [ishape[0], ishape[1], ishape[2]]),
            4 => (ishape[0], [ishape[1], ishape[2], ishape[3]]),
            r => return Err(Error::shape("conv2d", "input rank", "3 or 4", r)),
        };
        let wshape = self.shape(weight).to_vec();
        let dims = conv::conv_dims(chw, &wshape, &geom)?;
        if let Some(b) = bias {
            if self.shape(b) != [dims.cout] {
                return Err(Error::shape("conv2d", "bias length (C_out)", [dims.cout], self.shape(b)));
            }
        }
        let per_in = chw.iter().product::<usize>();
        let per_out = dims.cout * dims.oh * dims.ow;
        let mut out = Vec::with_capacity(batch * per_out);
        {
            let x = self.value(input);
            let w = self.value(weight);
            let b = bias.map(|b| self.value(b));
            for bi in 0..batch {
                out.extend(conv::forward(&x[bi * per_in..(bi + 1) * per_in], w, b, &dims, &geom));
            }
        }
        let shape = if ishape.len() == 3 {
            vec![dims.cout, dims.oh, dims.ow]
        } else {
            vec![batch, dims.cout, dims.oh, dims.ow]
        };
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                dims,
                batch,
            },
            rg,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        check_rank("linear", &wshape, 2)?;
        let (dout, din) = (wshape[0], wshape[1]);
        let last = *ishape.last().unwrap_or(&0);
        if last != din {
            return Err(Error::shape("linear", "input last dim (d_in)", din, last));
        }
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", "bias length (d_out)", [dout], self.shape(b)));
            }
        }
        let rows = self.value(input).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        gemm(false, true, rows, dout, din, self.value(input), self.value(weight), T::zero(), &mut out);
        if let Some(b) = bias {
            let bv = self.value(b);
            for r in 0..rows {
                for (o, &bb) in out[r * dout..(r + 1) * dout].iter_mut().zip(bv) {
                    *o = *o + bb;
                }
            }
        }
        let mut shape = ishape;
        *shape.last_mut().expect("non-empty") = dout;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    /// Normalizes over the leading (channel) axis at every position of the remaining axes.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let c = shape[0];
        let s = shape[1..].iter().product::<usize>();
        for (name, v) in [("gamma length", gamma), ("beta length", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape("layer_norm", name, [c], self.shape(v)));
            }
        }
        let (y, mean, rstd) =
            kernels::layer_norm_forward(self.value(input), c, s, self.value(gamma), self.value(beta), eps);
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            y,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                c,
                s,
                mean,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, input: Var) -> Var {
        let y = self.value(input).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(shape, y, Op::Gelu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = self.value(input).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(input);
        self.push(shape, y, Op::Sigmoid(input), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, "operand shape", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, y, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Resize a `[C, h, w]` map to `[C, out_h, out_w]` with half-pixel centres.
    pub fn resize(&mut self, input: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        check_rank("resize", &shape, 3)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize", "output size must be at least 1x1"));
        }
        let dims = [shape[0], shape[1], shape[2]];
        let y = kernels::resize_forward(self.value(input), dims, out_h, out_w, mode);
        let rg = self.rg(input);
        Ok(self.push(
            vec![dims[0], out_h, out_w],
            y,
            Op::Resize {
                input,
                dims,
                oh: out_h,
                ow: out_w,
                mode,
            },
            rg,
        ))
    }

    /// Windowed max over `[C, h, w]`. Pooling never enlarges: output dims
    /// above the input dims are rejected.
    pub fn adaptive_max_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.max_pool_windows(input, out_h, out_w, false)
    }

    /// Same window rule as [`Tape::adaptive_max_pool`], but an output larger
    /// than the input is allowed (windows then overlap and repeat cells).
    /// The query grid can be larger than a small feature map, so the decoder
    /// pools through this entry point.
    pub fn adaptive_max_pool_to(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.max_pool_windows(input, out_h, out_w, true)
    }

    fn max_pool_windows(&mut self, input: Var, out_h: usize, out_w: usize, enlarge: bool) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        check_rank("adaptive_max_pool", &shape, 3)?;
        let dims = [shape[0], shape[1], shape[2]];
        if out_h == 0 || out_w == 0 || (!enlarge && (out_h > dims[1] || out_w > dims[2])) {
            return Err(Error::invalid(
                "adaptive_max_pool",
                format!(
                    "output {out_h}x{out_w} must be non-empty and no larger than input {}x{}",
                    dims[1], dims[2]
                ),
            ));
        }
        let (y, argmax, gap) = kernels::adaptive_max_pool_forward(self.value(input), dims, out_h, out_w);
        if let Some(g) = gap {
            self.note_kink(g);
        }
        let rg = self.rg(input);
        Ok(self.push(vec![dims[0], out_h, out_w], y, Op::MaxPool { input, argmax }, rg))
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat", "trailing dims", &sa[1..], &sb[1..]));
        }
        let mut y = self.value(a).to_vec();
        y.extend_from_slice(self.value(b));
        let mut shape = sa;
        shape[0] += sb[0];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, y, Op::Concat(a, b), rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(input).len() {
            return Err(Error::shape("reshape", "element count", self.value(input).len(), n));
        }
        let y = self.value(input).to_vec();
        let rg = self.rg(input);
        Ok(self.push(shape.to_vec(), y, Op::Reshape(input), rg))
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        check_rank("transpose", &shape, 2)?;
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.value(input);
        let mut y = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                y[c * rows + r] = x[r * cols + c];
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![cols, rows], y, Op::Transpose { input, rows, cols }, rg))
    }

    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        check_rank("gather_rows", &shape, 2)?;
        let cols = shape[1];
        if let Some(&r) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::shape("gather_rows", "row index", format!("< {}", shape[0]), r));
        }
        let x = self.value(input);
        let y: Vec<T> = rows.iter().flat_map(|&r| x[r * cols..(r + 1) * cols].iter().copied()).collect();
        let rg = self.rg(input);
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "empty row selection"));
        }
        Ok(self.push(
            vec![rows.len(), cols],
            y,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Mean over rows of `-w[t] * log softmax(logits)[t]`.
    ///
    /// `logits` is `[K]` or `[R, K]`; `targets` has one entry per row.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], class_weights: Option<&[T]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, k) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            r => return Err(Error::shape("softmax_xent", "logits rank", "1 or 2", r)),
        };
        if targets.len() != rows {
            return Err(Error::shape("softmax_xent", "target count", rows, targets.len()));
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::shape("softmax_xent", "class weight count", k, w.len()));
            }
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::TargetOutOfRange {
                op: "softmax_xent",
                target: t,
                classes: k,
            });
        }
        let x = self.value(logits);
        let inv_rows = T::one() / T::c(rows as f64);
        let mut probs = vec![T::zero(); rows * k];
        let mut row_scale = Vec::with_capacity(rows);
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &x[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            let t = targets[r];
            let w = class_weights.map_or(T::one(), |w| w[t]);
            let nll = -(row[t] - m - lz);
            loss = loss + w * nll;
            row_scale.push(w * inv_rows);
        }
        loss = loss * inv_rows;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_scale,
                probs,
                k,
            },
            rg,
        ))
    }

    /// Sum of absolute differences against a fixed target of the same size.
    pub fn l1_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::shape("l1_loss", "element count", self.value(pred).len(), target.len()));
        }
        let s = self.value(pred).iter().zip(target).map(|(&p, &t)| (p - t).abs()).sum();
        if let Some(gap) = self.value(pred).iter().zip(target).map(|(&p, &t)| (p - t).abs()).reduce(T::min) {
            self.note_kink(gap);
        }
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![s],
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Sum over rows of `1 - giou`, with `pred: [M, 4]` as `(cx, cy, w, h)` and
    /// `target` as `M` fixed `(x1, y1, x2, y2)` boxes.
    pub fn giou_loss(&mut self, pred: Var, target: &[[T; 4]]) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape.len() != 2 || shape[1] != 4 {
            return Err(Error::shape("giou_loss", "pred shape", "[M, 4]", shape));
        }
        if shape[0] != target.len() {
            return Err(Error::shape("giou_loss", "target count", shape[0], target.len()));
        }
        let p = self.value(pred);
        let mut total = T::zero();
        let mut grads = Vec::with_capacity(target.len());
        let mut kink: Option<T> = None;
        for (r, t) in target.iter().enumerate() {
            let term = giou_term([p[r * 4], p[r * 4 + 1], p[r * 4 + 2], p[r * 4 + 3]], *t);
            total = total + term.loss;
            grads.push(term.grad);
            kink = Some(kink.map_or(term.kink, |k| k.min(term.kink)));
        }
        if let Some(k) = kink {
            self.note_kink(k);
        }
        let rg = self.rg(pred);
        Ok(self.push(vec![1], vec![total], Op::Giou { pred, grads }, rg))
    }

    /// Reverse pass from a scalar. Every recorded op is visited at most once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn zeros_like(&self, v: Var) -> Vec<T> {
        vec![T::zero(); self.nodes[v.0].value.len()]
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                dims,
                batch,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let per_in = dims.cin * dims.h * dims.w;
                let per_out = dims.cout * dims.oh * dims.ow;
                let mut dx = self.rg(*input).then(|| self.zeros_like(*input));
                let mut dw = self.rg(*weight).then(|| self.zeros_like(*weight));
                let mut db = bias.filter(|b| self.rg(*b)).map(|b| self.zeros_like(b));
                for bi in 0..*batch {
                    conv::backward(
                        &x[bi * per_in..(bi + 1) * per_in],
                        w,
                        &g[bi * per_out..(bi + 1) * per_out],
                        dims,
                        geom,
                        dx.as_mut().map(|d| &mut d[bi * per_in..(bi + 1) * per_in]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                din,
                dout,
            } => {
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(false, false, *rows, *din, *dout, g, self.value(*weight), T::zero(), &mut dx);
                    self.accumulate(grads, *input, dx);
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(true, false, *dout, *din, *rows, g, self.value(*input), T::zero(), &mut dw);
                    self.accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); *dout];
                    for r in 0..*rows {
                        for (d, &gv) in db.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *d = *d + gv;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                c,
                s,
                mean,
                rstd,
            } => {
                let mut dx = self.rg(*input).then(|| self.zeros_like(*input));
                let mut dg = self.rg(*gamma).then(|| self.zeros_like(*gamma));
                let mut dbeta = self.rg(*beta).then(|| self.zeros_like(*beta));
                kernels::layer_norm_backward(
                    self.value(*input),
                    *c,
                    *s,
                    self.value(*gamma),
                    mean,
                    rstd,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                if let Some(d) = dx {
                    self.accumulate(grads, *input, d);
                }
                if let Some(d) = dg {
                    self.accumulate(grads, *gamma, d);
                }
                if let Some(d) = dbeta {
                    self.accumulate(grads, *beta, d);
                }
            }
            Op::Gelu(a) => {
                let d = self
                    .value(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gv * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = node
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.value(*b)).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(self.value(*a)).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let d = g.iter().map(|&gv| gv * *c).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Resize {
                input,
                dims,
                oh,
                ow,
                mode,
            } => {
                let mut dx = self.zeros_like(*input);
                kernels::resize_backward(g, *dims, *oh, *ow, *mode, &mut dx);
                self.accumulate(grads, *input, dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = self.zeros_like(*input);
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i] = dx[i] + gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, g[..na].to_vec());
                self.accumulate(grads, *b, g[na..].to_vec());
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose { input, rows, cols } => {
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GatherRows { input, rows, cols } => {
                let mut dx = self.zeros_like(*input);
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..*cols {
                        dx[r * cols + c] = dx[r * cols + c] + g[i * cols + c];
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_scale,
                probs,
                k,
            } => {
                let mut d = probs.clone();
                for (r, (&t, &s)) in targets.iter().zip(row_scale).enumerate() {
                    let row = &mut d[r * k..(r + 1) * k];
                    row[t] = row[t] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * s * g[0]);
                }
                self.accumulate(grads, *logits, d);
            }
            Op::L1 { pred, target } => {
                let d = self
                    .value(*pred)
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p > t {
                            g[0]
                        } else if p < t {
                            -g[0]
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, d);
            }
            Op::Giou { pred, grads: gr } => {
                let d = gr.iter().flat_map(|row| row.map(|v| v * g[0])).collect();
                self.accumulate(grads, *pred, d);
            }
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf, if the leaf was reachable.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add each parameter's gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                let acc = &mut store.get_mut(id).grad;
                acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }

    /// Dense per-parameter gradients in store order (zeros where unreachable).
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out[id.index()].copy_from_slice(g);
            }
        }
        out
    }
}
