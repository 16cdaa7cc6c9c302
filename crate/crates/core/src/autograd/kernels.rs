//! Forward/backward kernels for the non-convolution ops.

use crate::tensor::Element;

/// Channels-first layer norm over `c` channels at each of `s` positions.
/// Returns `(y, mean, rstd)`.
pub(crate) fn layer_norm_forward<T: Element>(
    x: &[T],
    c: usize,
    s: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_c = T::one() / T::c(c as f64);
    let mut mean = vec![T::zero(); s];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&x[ch * s..(ch + 1) * s]) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_c);
    let mut var = vec![T::zero(); s];
    for ch in 0..c {
        for ((v, &xv), &m) in var.iter_mut().zip(&x[ch * s..(ch + 1) * s]).zip(&mean) {
            let d = xv - m;
            *v = *v + d * d;
        }
    }
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v * inv_c + eps).sqrt()).collect();
    let mut y = vec![T::zero(); c * s];
    for ch in 0..c {
        let (g, b) = (gamma[ch], beta[ch]);
        for p in 0..s {
            y[ch * s + p] = (x[ch * s + p] - mean[p]) * rstd[p] * g + b;
        }
    }
    (y, mean, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<T: Element>(
    x: &[T],
    c: usize,
    s: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let xhat = |ch: usize, p: usize| (x[ch * s + p] - mean[p]) * rstd[p];
    if let Some(dg) = dgamma {
        for ch in 0..c {
            let mut acc = T::zero();
            for p in 0..s {
                acc = acc + dy[ch * s + p] * xhat(ch, p);
            }
            dg[ch] = dg[ch] + acc;
        }
    }
    if let Some(db) = dbeta {
        for ch in 0..c {
            db[ch] = db[ch] + dy[ch * s..(ch + 1) * s].iter().copied().sum();
        }
    }
    if let Some(dx) = dx {
        let inv_c = T::one() / T::c(c as f64);
        let mut m1 = vec![T::zero(); s];
        let mut m2 = vec![T::zero(); s];
        for ch in 0..c {
            for p in 0..s {
                let dxh = dy[ch * s + p] * gamma[ch];
                m1[p] = m1[p] + dxh;
                m2[p] = m2[p] + dxh * xhat(ch, p);
            }
        }
        for ch in 0..c {
            for p in 0..s {
                let dxh = dy[ch * s + p] * gamma[ch];
                let v = rstd[p] * (dxh - m1[p] * inv_c - xhat(ch, p) * m2[p] * inv_c);
                dx[ch * s + p] = dx[ch * s + p] + v;
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let half = T::c(0.5);
    half * x * (T::one() + (x * T::c(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(FRAC_1_SQRT_2)).erf());
    let pdf = T::c(INV_SQRT_2PI) * (-(x * x) * T::c(0.5)).exp();
    cdf + x * pdf
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    #[default]
    Bilinear,
    Nearest,
}

/// One interpolation tap pair per output index along an axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

/// Half-pixel-centre source mapping, `src = (dst + 0.5) * in/out - 0.5`,
/// clamped to `[0, in - 1]`.
pub(crate) fn resize_taps<T: Element>(input: usize, output: usize, mode: ResizeMode) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| match mode {
            ResizeMode::Bilinear => {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                let f = s - i0 as f64;
                Tap {
                    i0,
                    i1,
                    w0: T::c(1.0 - f),
                    w1: T::c(f),
                }
            }
            ResizeMode::Nearest => {
                let i = (((d as f64 + 0.5) * scale).floor() as usize).min(input - 1);
                Tap {
                    i0: i,
                    i1: i,
                    w0: T::one(),
                    w1: T::zero(),
                }
            }
        })
        .collect()
}

pub(crate) fn resize_forward<T: Element>(
    x: &[T],
    [c, h, w]: [usize; 3],
    oh: usize,
    ow: usize,
    mode: ResizeMode,
) -> Vec<T> {
    let ry = resize_taps::<T>(h, oh, mode);
    let rx = resize_taps::<T>(w, ow, mode);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, ty) in ry.iter().enumerate() {
            for (ox, tx) in rx.iter().enumerate() {
                let v = ty.w0 * (tx.w0 * plane[ty.i0 * w + tx.i0] + tx.w1 * plane[ty.i0 * w + tx.i1])
                    + ty.w1 * (tx.w0 * plane[ty.i1 * w + tx.i0] + tx.w1 * plane[ty.i1 * w + tx.i1]);
                out[(ch * oh + oy) * ow + ox] = v;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Element>(
    dy: &[T],
    [c, h, w]: [usize; 3],
    oh: usize,
    ow: usize,
    mode: ResizeMode,
    dx: &mut [T],
) {
    let ry = resize_taps::<T>(h, oh, mode);
    let rx = resize_taps::<T>(w, ow, mode);
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, ty) in ry.iter().enumerate() {
            for (ox, tx) in rx.iter().enumerate() {
                let g = dy[(ch * oh + oy) * ow + ox];
                for (iy, wy) in [(ty.i0, ty.w0), (ty.i1, ty.w1)] {
                    for (ix, wx) in [(tx.i0, tx.w0), (tx.i1, tx.w1)] {
                        plane[iy * w + ix] = plane[iy * w + ix] + g * wy * wx;
                    }
                }
            }
        }
    }
}

/// Half-open window `[floor(i*n/out), ceil((i+1)*n/out))`.
pub(crate) fn pool_window(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = i * n / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end)
}

/// Returns the pooled values, flat argmax indices, and the smallest gap
/// between a window's maximum and its runner-up (`None` when every window
/// has a single element).
pub(crate) fn adaptive_max_pool_forward<T: Element>(
    x: &[T],
    [c, h, w]: [usize; 3],
    oh: usize,
    ow: usize,
) -> (Vec<T>, Vec<usize>, Option<T>) {
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let mut min_gap: Option<T> = None;
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1) = pool_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_window(ox, w, ow);
                let mut best = T::neg_infinity();
                let mut second = T::neg_infinity();
                let mut best_i = usize::MAX;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let i = (ch * h + iy) * w + ix;
                        let v = x[i];
                        if v > best || best_i == usize::MAX {
                            second = best;
                            best = v;
                            best_i = i;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if (y1 - y0) * (x1 - x0) > 1 {
                    let gap = best - second;
                    min_gap = Some(min_gap.map_or(gap, |g| g.min(gap)));
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, min_gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_window_rule() {
        assert_eq!(pool_window(0, 3, 2), (0, 2));
        assert_eq!(pool_window(1, 3, 2), (1, 3));
        assert_eq!(pool_window(0, 4, 5), (0, 1));
        assert_eq!(pool_window(4, 4, 5), (3, 4));
        assert_eq!(pool_window(2, 4, 5), (1, 3));
    }

    #[test]
    fn pool_first_argmax_on_ties() {
        let (v, arg, gap) = adaptive_max_pool_forward(&[2.0f64, 2.0, 1.0, 2.0], [1, 2, 2], 1, 1);
        assert_eq!(v, vec![2.0]);
        assert_eq!(arg, vec![0]);
        assert_eq!(gap, Some(0.0));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746).abs() < 1e-6);
        assert!(gelu(-10.0f64).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
