//! 2-D convolution kernels (im2col + GEMM, with a direct depthwise path).

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Wrap-around padding. Only used to test translation equivariance.
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            groups,
            pad_mode: PadMode::Zeros,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    fn cin_g(&self, g: &ConvGeom) -> usize {
        self.cin / g.groups
    }
    fn cout_g(&self, g: &ConvGeom) -> usize {
        self.cout / g.groups
    }
    fn is_depthwise(&self, g: &ConvGeom) -> bool {
        g.groups == self.cin && self.cout == self.cin && g.groups > 1
    }
    fn is_pointwise(&self, g: &ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.padding == 0
    }
}

pub(crate) fn conv_dims(
    input: [usize; 3],
    weight: &[usize],
    geom: &ConvGeom,
) -> Result<ConvDims> {
    let [cin, h, w] = input;
    if weight.len() != 4 {
        return Err(Error::shape("conv2d", "weight rank", 4, weight.len()));
    }
    let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if geom.groups == 0 || geom.stride == 0 {
        return Err(Error::invalid("conv2d", "groups and stride must be positive"));
    }
    if cin % geom.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            "C_in (divisible by groups)",
            format!("multiple of {}", geom.groups),
            cin,
        ));
    }
    if cout % geom.groups != 0 {
        return Err(Error::shape(
            "conv2d",
            "C_out (divisible by groups)",
            format!("multiple of {}", geom.groups),
            cout,
        ));
    }
    if cin_g != cin / geom.groups {
        return Err(Error::shape("conv2d", "C_in/groups", cin / geom.groups, cin_g));
    }
    if h + 2 * geom.padding < kh {
        return Err(Error::shape("conv2d", "H (padded)", format!(">= {kh}"), h + 2 * geom.padding));
    }
    if w + 2 * geom.padding < kw {
        return Err(Error::shape("conv2d", "W (padded)", format!(">= {kw}"), w + 2 * geom.padding));
    }
    let oh = (h + 2 * geom.padding - kh) / geom.stride + 1;
    let ow = (w + 2 * geom.padding - kw) / geom.stride + 1;
    Ok(ConvDims {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
    })
}

#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, size: usize, mode: PadMode) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    if i >= 0 && (i as usize) < size {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zeros => None,
            PadMode::Circular => Some(i.rem_euclid(size as isize) as usize),
        }
    }
}

/// Row/column source tables: `table[o * k_len + k]` is the input index or `None`.
fn source_table(out: usize, k_len: usize, stride: usize, pad: usize, size: usize, mode: PadMode) -> Vec<Option<usize>> {
    let mut t = Vec::with_capacity(out * k_len);
    for o in 0..out {
        for k in 0..k_len {
            t.push(src(o, k, stride, pad, size, mode));
        }
    }
    t
}

/// Lay out the patches of channels `[c0, c0 + cn)` as a `(cn*kh*kw) x (oh*ow)` matrix.
fn im2col<T: Element>(x: &[T], d: &ConvDims, g: &ConvGeom, c0: usize, cn: usize, cols: &mut [T]) {
    let rows = source_table(d.oh, d.kh, g.stride, g.padding, d.h, g.pad_mode);
    let colt = source_table(d.ow, d.kw, g.stride, g.padding, d.w, g.pad_mode);
    let ohw = d.oh * d.ow;
    for ci in 0..cn {
        let plane = &x[(c0 + ci) * d.h * d.w..(c0 + ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut cols[((ci * d.kh + ky) * d.kw + kx) * ohw..][..ohw];
                for oy in 0..d.oh {
                    let out_row = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    match rows[oy * d.kh + ky] {
                        None => out_row.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * d.w..(iy + 1) * d.w];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = match colt[ox * d.kw + kx] {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], d: &ConvDims, g: &ConvGeom, c0: usize, cn: usize, dx: &mut [T]) {
    let rows = source_table(d.oh, d.kh, g.stride, g.padding, d.h, g.pad_mode);
    let colt = source_table(d.ow, d.kw, g.stride, g.padding, d.w, g.pad_mode);
    let ohw = d.oh * d.ow;
    for ci in 0..cn {
        let plane = &mut dx[(c0 + ci) * d.h * d.w..(c0 + ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &cols[((ci * d.kh + ky) * d.kw + kx) * ohw..][..ohw];
                for oy in 0..d.oh {
                    if let Some(iy) = rows[oy * d.kh + ky] {
                        for ox in 0..d.ow {
                            if let Some(ix) = colt[ox * d.kw + kx] {
                                plane[iy * d.w + ix] = plane[iy * d.w + ix] + row[oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    g: &ConvGeom,
) -> Vec<T> {
    let ohw = d.oh * d.ow;
    let mut out = vec![T::zero(); d.cout * ohw];
    if d.is_depthwise(g) {
        depthwise_forward(x, w, d, g, &mut out);
    } else if d.is_pointwise(g) {
        let cin_g = d.cin_g(g);
        let cout_g = d.cout_g(g);
        for grp in 0..g.groups {
            gemm(
                false,
                false,
                cout_g,
                ohw,
                cin_g,
                &w[grp * cout_g * cin_g..],
                &x[grp * cin_g * ohw..],
                T::zero(),
                &mut out[grp * cout_g * ohw..],
            );
        }
    } else {
        let cin_g = d.cin_g(g);
        let cout_g = d.cout_g(g);
        let kk = cin_g * d.kh * d.kw;
        let mut cols = vec![T::zero(); kk * ohw];
        for grp in 0..g.groups {
            im2col(x, d, g, grp * cin_g, cin_g, &mut cols);
            gemm(
                false,
                false,
                cout_g,
                ohw,
                kk,
                &w[grp * cout_g * kk..],
                &cols,
                T::zero(),
                &mut out[grp * cout_g * ohw..],
            );
        }
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out[co * ohw..(co + 1) * ohw].iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    out
}

/// Accumulates into whichever of `dx`, `dw`, `db` are present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let ohw = d.oh * d.ow;
    if let Some(db) = db {
        for (co, b) in db.iter_mut().enumerate() {
            *b = *b + dy[co * ohw..(co + 1) * ohw].iter().copied().sum();
        }
    }
    if d.is_depthwise(g) {
        depthwise_backward(x, w, dy, d, g, dx, dw);
        return;
    }
    let cin_g = d.cin_g(g);
    let cout_g = d.cout_g(g);
    if d.is_pointwise(g) {
        for grp in 0..g.groups {
            let dyg = &dy[grp * cout_g * ohw..(grp + 1) * cout_g * ohw];
            let xg = &x[grp * cin_g * ohw..(grp + 1) * cin_g * ohw];
            let wg = &w[grp * cout_g * cin_g..(grp + 1) * cout_g * cin_g];
            if let Some(dw) = dw.as_deref_mut() {
                gemm(false, true, cout_g, cin_g, ohw, dyg, xg, T::one(), &mut dw[grp * cout_g * cin_g..]);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(true, false, cin_g, ohw, cout_g, wg, dyg, T::one(), &mut dx[grp * cin_g * ohw..]);
            }
        }
        return;
    }
    let kk = cin_g * d.kh * d.kw;
    let mut cols = vec![T::zero(); kk * ohw];
    for grp in 0..g.groups {
        let dyg = &dy[grp * cout_g * ohw..(grp + 1) * cout_g * ohw];
        let wg = &w[grp * cout_g * kk..(grp + 1) * cout_g * kk];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x, d, g, grp * cin_g, cin_g, &mut cols);
            gemm(false, true, cout_g, kk, ohw, dyg, &cols, T::one(), &mut dw[grp * cout_g * kk..]);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(true, false, kk, ohw, cout_g, wg, dyg, T::zero(), &mut cols);
            col2im(&cols, d, g, grp * cin_g, cin_g, dx);
        }
    }
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], d: &ConvDims, g: &ConvGeom, out: &mut [T]) {
    let rows = source_table(d.oh, d.kh, g.stride, g.padding, d.h, g.pad_mode);
    let cols = source_table(d.ow, d.kw, g.stride, g.padding, d.w, g.pad_mode);
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        let kern = &w[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
        let o = &mut out[c * d.oh * d.ow..(c + 1) * d.oh * d.ow];
        for oy in 0..d.oh {
            for ky in 0..d.kh {
                let Some(iy) = rows[oy * d.kh + ky] else { continue };
                let src_row = &plane[iy * d.w..(iy + 1) * d.w];
                for ox in 0..d.ow {
                    let mut acc = T::zero();
                    for kx in 0..d.kw {
                        if let Some(ix) = cols[ox * d.kw + kx] {
                            acc = acc + kern[ky * d.kw + kx] * src_row[ix];
                        }
                    }
                    o[oy * d.ow + ox] = o[oy * d.ow + ox] + acc;
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let rows = source_table(d.oh, d.kh, g.stride, g.padding, d.h, g.pad_mode);
    let cols = source_table(d.ow, d.kw, g.stride, g.padding, d.w, g.pad_mode);
    let hw = d.h * d.w;
    let khw = d.kh * d.kw;
    for c in 0..d.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        let kern = &w[c * khw..(c + 1) * khw];
        let g_out = &dy[c * d.oh * d.ow..(c + 1) * d.oh * d.ow];
        for oy in 0..d.oh {
            for ky in 0..d.kh {
                let Some(iy) = rows[oy * d.kh + ky] else { continue };
                for ox in 0..d.ow {
                    let go = g_out[oy * d.ow + ox];
                    for kx in 0..d.kw {
                        if let Some(ix) = cols[ox * d.kw + kx] {
                            if let Some(dw) = dw.as_deref_mut() {
                                let k = c * khw + ky * d.kw + kx;
                                dw[k] = dw[k] + go * plane[iy * d.w + ix];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let p = c * hw + iy * d.w + ix;
                                dx[p] = dx[p] + go * kern[ky * d.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}
