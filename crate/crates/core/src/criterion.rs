//! Set-prediction loss: match each layer's predictions to the ground truth,
//! then score classes on every query and boxes on matched queries only.

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::decoder::DetectionVars;
use crate::error::Result;
use crate::matching::{hungarian_assign, matching_cost_matrix, Assignment, CostWeights, GroundTruth};
use crate::tensor::Element;

/// Unweighted components of one decoder layer's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LayerLoss {
    pub class_loss: f64,
    pub l1_loss: f64,
    pub giou_loss: f64,
    pub total: f64,
}

/// Components summed over the supervised layers;
/// `total = w_class·class + w_l1·l1 + w_giou·giou`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub class_loss: f64,
    pub l1_loss: f64,
    pub giou_loss: f64,
    pub total: f64,
    pub per_layer: Vec<LayerLoss>,
}

impl LossBreakdown {
    /// Elementwise mean, used to average images in a batch.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.class_loss += b.class_loss / n;
            out.l1_loss += b.l1_loss / n;
            out.giou_loss += b.giou_loss / n;
            out.total += b.total / n;
        }
        out
    }
}

pub struct SetLoss {
    /// Differentiable scalar.
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Matching of each supervised layer.
    pub assignments: Vec<Assignment>,
}

fn to_f64<T: Element>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().expect("finite")).collect()
}

/// Loss for one image. With `weights.aux` every layer is supervised and the
/// layer losses are summed; otherwise only the last layer counts.
pub fn set_prediction_loss<T: Element>(
    tape: &mut Tape<T>,
    layers: &[DetectionVars],
    gts: &[GroundTruth],
    weights: &CostWeights,
) -> Result<SetLoss> {
    let supervised = if weights.aux { layers } else { &layers[layers.len() - 1..] };
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(supervised.len());
    for det in supervised {
        let (layer_var, layer, assignment) = layer_loss(tape, *det, gts, weights)?;
        total = Some(match total {
            Some(t) => tape.add(t, layer_var)?,
            None => layer_var,
        });
        breakdown.class_loss += layer.class_loss;
        breakdown.l1_loss += layer.l1_loss;
        breakdown.giou_loss += layer.giou_loss;
        breakdown.total += layer.total;
        breakdown.per_layer.push(layer);
        assignments.push(assignment);
    }
    Ok(SetLoss {
        total: total.expect("at least one layer"),
        breakdown,
        assignments,
    })
}

fn layer_loss<T: Element>(
    tape: &mut Tape<T>,
    det: DetectionVars,
    gts: &[GroundTruth],
    weights: &CostWeights,
) -> Result<(Var, LayerLoss, Assignment)> {
    let n = tape.shape(det.logits)[0];
    let k1 = tape.shape(det.logits)[1];
    let cost = matching_cost_matrix(
        &to_f64(tape.value(det.logits)),
        &to_f64(tape.value(det.boxes)),
        n,
        gts,
        weights,
    )?;
    let assignment = hungarian_assign(&cost)?;

    let no_object = k1 - 1;
    let mut targets = vec![no_object; n];
    for &(g, p) in &assignment.pairs {
        targets[p] = gts[g].class;
    }
    let mut class_weights = vec![T::one(); k1];
    class_weights[no_object] = T::c(weights.no_object_weight);
    let ce = tape.softmax_xent(det.logits, &targets, Some(&class_weights))?;
    let mut layer = LayerLoss {
        class_loss: tape.scalar(ce).to_f64().expect("finite"),
        ..LayerLoss::default()
    };
    let mut total = tape.scale(ce, T::c(weights.class_weight));

    if !assignment.pairs.is_empty() {
        let inv_m = T::c(1.0 / gts.len() as f64);
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(_, p)| p).collect();
        let matched = tape.gather_rows(det.boxes, &rows)?;
        let l1_target: Vec<T> = assignment
            .pairs
            .iter()
            .flat_map(|&(g, _)| gts[g].bbox.to_array().map(T::c))
            .collect();
        let giou_target: Vec<[T; 4]> = assignment
            .pairs
            .iter()
            .map(|&(g, _)| gts[g].bbox.to_xyxy().to_array().map(T::c))
            .collect();
        let l1 = tape.l1_loss(matched, &l1_target)?;
        let l1 = tape.scale(l1, inv_m);
        let gl = tape.giou_loss(matched, &giou_target)?;
        let gl = tape.scale(gl, inv_m);
        layer.l1_loss = tape.scalar(l1).to_f64().expect("finite");
        layer.giou_loss = tape.scalar(gl).to_f64().expect("finite");
        let l1w = tape.scale(l1, T::c(weights.l1_weight));
        let glw = tape.scale(gl, T::c(weights.giou_weight));
        total = tape.add(total, l1w)?;
        total = tape.add(total, glw)?;
    }
    layer.total = tape.scalar(total).to_f64().expect("finite");
    Ok((total, layer, assignment))
}
