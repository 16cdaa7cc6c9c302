//! Prediction/ground-truth matching: cost construction, an O(n³) Hungarian
//! solver and an exhaustive oracle.

use serde::{Deserialize, Serialize};

use crate::boxgeom::{giou, BoxCxCyWh};
use crate::error::{Error, Result};

/// Coefficients shared by the matching cost and the set-prediction loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub no_object_weight: f64,
    /// Supervise every decoder layer, not just the last.
    pub aux: bool,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class_weight: 1.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            no_object_weight: 0.1,
            aux: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BoxCxCyWh,
}

/// Dense row-major matrix; rows are predictions, columns ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("cost_matrix", "entry count", rows * cols, data.len()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("cost_matrix", "row length", cols, r.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFiniteCost {
                row: i / self.cols,
                col: i % self.cols,
            }),
            None => Ok(()),
        }
    }

    fn check_shape(&self) -> Result<()> {
        if self.cols > self.rows {
            return Err(Error::TooManyTargets {
                gts: self.cols,
                queries: self.rows,
            });
        }
        Ok(())
    }
}

/// Injective map from ground truths to predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(gt_index, pred_index)`, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    fn from_pred_of(cost: &CostMatrix, pred_of: &[usize]) -> Self {
        let pairs: Vec<(usize, usize)> = pred_of.iter().copied().enumerate().collect();
        let total_cost = pairs.iter().map(|&(g, p)| cost.get(p, g)).sum();
        Assignment { pairs, total_cost }
    }

    pub fn pred_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(g, _)| g == gt).map(|&(_, p)| p)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `w_class·(−p̂(class)) + w_l1·‖Δbox‖₁ + w_giou·(1 − giou)` for every
/// (prediction, ground truth) pair.
///
/// `logits` is `N x (K+1)` row-major, `boxes` is `N x 4` in `(cx, cy, w, h)`.
pub fn matching_cost_matrix(
    logits: &[f64],
    boxes: &[f64],
    num_preds: usize,
    gts: &[GroundTruth],
    weights: &CostWeights,
) -> Result<CostMatrix> {
    if gts.len() > num_preds {
        return Err(Error::TooManyTargets {
            gts: gts.len(),
            queries: num_preds,
        });
    }
    if num_preds == 0 || logits.len() % num_preds != 0 || boxes.len() != num_preds * 4 {
        return Err(Error::shape(
            "matching_cost_matrix",
            "prediction arrays",
            format!("N={num_preds} rows"),
            (logits.len(), boxes.len()),
        ));
    }
    let k1 = logits.len() / num_preds;
    if let Some(gt) = gts.iter().find(|g| g.class + 1 >= k1) {
        return Err(Error::TargetOutOfRange {
            op: "matching_cost_matrix",
            target: gt.class,
            classes: k1 - 1,
        });
    }
    let mut data = Vec::with_capacity(num_preds * gts.len());
    for i in 0..num_preds {
        let probs = softmax(&logits[i * k1..(i + 1) * k1]);
        let pb = BoxCxCyWh::from_array([boxes[i * 4], boxes[i * 4 + 1], boxes[i * 4 + 2], boxes[i * 4 + 3]]);
        for gt in gts {
            let l1: f64 = pb
                .to_array()
                .iter()
                .zip(gt.bbox.to_array())
                .map(|(a, b)| (a - b).abs())
                .sum();
            let g = giou(pb.to_xyxy(), gt.bbox.to_xyxy()).giou;
            data.push(
                weights.class_weight * -probs[gt.class]
                    + weights.l1_weight * l1
                    + weights.giou_weight * (1.0 - g),
            );
        }
    }
    CostMatrix::new(num_preds, gts.len(), data)
}

/// Minimum-cost assignment of every ground truth (column) to a distinct
/// prediction (row). Among optimal assignments the lexicographically
/// smallest pair list is returned.
pub fn hungarian_assign(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    cost.check_shape()?;
    let (n, m) = (cost.rows, cost.cols);
    if m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }

    // Square matrix, extra columns padded with a constant above every real entry.
    let max_abs = cost.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let pad = max_abs + 1.0;
    let at = |i: usize, j: usize| if j < m { cost.get(i, j) } else { pad };

    // Potentials-based shortest augmenting path, 1-indexed with a sentinel at 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    // 0-indexed matching and the equality subgraph of the optimal duals.
    let mut row_of: Vec<usize> = (1..=n).map(|j| row_of_col[j] - 1).collect();
    let mut col_of = vec![0usize; n];
    for (j, &r) in row_of.iter().enumerate() {
        col_of[r] = j;
    }
    let tol = 1e-9 * (1.0 + max_abs);
    let tight = |i: usize, j: usize| (at(i, j) - u[i + 1] - v[j + 1]).abs() <= tol;

    // Every optimal assignment is a perfect matching on tight edges, so the
    // lexicographic minimum is found greedily one ground truth at a time.
    let mut fixed = vec![false; n];
    for j in 0..m {
        let r0 = row_of[j];
        for r in 0..r0 {
            if !tight(r, j) || fixed[col_of[r]] {
                continue;
            }
            let c = col_of[r];
            row_of[j] = r;
            col_of[r] = j;
            fixed[j] = true;
            let mut visited = vec![false; n];
            if reroute(r0, c, &tight, &fixed, &mut visited, &mut row_of, &mut col_of) {
                break;
            }
            fixed[j] = false;
            row_of[j] = r0;
            col_of[r0] = j;
            row_of[c] = r;
            col_of[r] = c;
        }
        fixed[j] = true;
    }

    Ok(Assignment::from_pred_of(cost, &row_of[..m]))
}

/// Alternating path over tight edges from a free `row` to the free `target` column.
fn reroute(
    row: usize,
    target: usize,
    tight: &impl Fn(usize, usize) -> bool,
    fixed: &[bool],
    visited: &mut [bool],
    row_of: &mut [usize],
    col_of: &mut [usize],
) -> bool {
    for c in 0..fixed.len() {
        if visited[c] || fixed[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target || reroute(row_of[c], target, tight, fixed, visited, row_of, col_of) {
            row_of[c] = row;
            col_of[row] = c;
            return true;
        }
    }
    false
}

/// Exhaustive search over all injections; the reference for [`hungarian_assign`].
pub fn hungarian_bruteforce(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    cost.check_shape()?;
    if cost.rows > 8 {
        return Err(Error::BruteForceTooLarge(cost.rows));
    }
    let m = cost.cols;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(m);
    let mut used = vec![false; cost.rows];
    enumerate(cost, &mut current, &mut used, &mut best);
    let (_, pred_of) = best.expect("at least the empty injection exists");
    Ok(Assignment::from_pred_of(cost, &pred_of))
}

fn enumerate(cost: &CostMatrix, current: &mut Vec<usize>, used: &mut [bool], best: &mut Option<(f64, Vec<usize>)>) {
    if current.len() == cost.cols {
        let total: f64 = current.iter().enumerate().map(|(g, &p)| cost.get(p, g)).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            *best = Some((total, current.clone()));
        }
        return;
    }
    for p in 0..cost.rows {
        if !used[p] {
            used[p] = true;
            current.push(p);
            enumerate(cost, current, used, best);
            current.pop();
            used[p] = false;
        }
    }
}
