//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate; parameters
    /// follow the explicit inputs in store order.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Smallest distance to a non-differentiable point seen in the base forward pass.
    pub kink_margin: Option<f64>,
}

/// Denominator floor of [`relative_error`]. Loss evaluations on the
/// composed model carry f64 rounding near 1e-14, which the `1/eps` of a
/// difference at `eps = 1e-4` lifts to ~1e-10 in the numeric gradient; a
/// coordinate below this floor is held to `|analytic - numeric| < 1e-5 * floor`.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// `|analytic - numeric| / max(GRADIENT_FLOOR, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRADIENT_FLOOR)
}

/// Fourth-order central difference `(8(f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`.
/// The two-point stencil leaves an `eps^2 f'''/6` truncation error that
/// swamps coordinates with small gradients on deep compositions.
fn five_point(eps: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p1, m1) = (f(eps)?, f(-eps)?);
    let (p2, m2) = (f(2.0 * eps)?, f(-2.0 * eps)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps))
}

/// Checks a scalar function of plain tensor inputs.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    grad_check_params(&mut store, inputs, eps, |tape, _, vars| f(tape, vars))
}

/// Checks a scalar function of explicit inputs and every parameter in `store`.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, store, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, store, &vars)?;
    let kink_margin = tape.kink_margin();
    let grads = tape.backward(out)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    analytic.extend(grads.param_grads(store));
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        kink_margin,
    };
    let mut record = |idx: usize, coord: usize, a: f64, n: f64| {
        let e = relative_error(a, n);
        report.coords_checked += 1;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            if e >= report.max_rel_error {
                report.worst = Some((idx, coord));
            }
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for c in 0..inputs[i].numel() {
            let orig = work[i].data()[c];
            let numeric = five_point(eps, |h| {
                work[i].data_mut()[c] = orig + h;
                let v = eval(store, &work);
                work[i].data_mut()[c] = orig;
                v
            })?;
            record(i, c, analytic[i][c], numeric);
        }
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        let n = store.get(id).tensor.numel();
        for c in 0..n {
            let orig = store.get(id).tensor.data()[c];
            let numeric = five_point(eps, |h| {
                store.get_mut(id).tensor.data_mut()[c] = orig + h;
                let v = eval(store, inputs);
                store.get_mut(id).tensor.data_mut()[c] = orig;
                v
            })?;
            record(inputs.len() + pi, c, analytic[inputs.len() + pi][c], numeric);
        }
    }
    Ok(report)
}
