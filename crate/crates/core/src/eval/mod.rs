//! COCO-style average precision and query-slot export.

mod ap;
mod slots;

pub use ap::{
    coco_thresholds, evaluate_ap, greedy_match, interpolated_ap, recall_at, AreaRange, DetectionRecord, EvalReport,
    GtRecord, MatchLabel, MAX_DETECTIONS,
};
pub use slots::{export_query_slots, slot_centroids, write_slots_csv, SlotCentroid, SlotRow, SLOT_CSV_HEADER};

use rayon::prelude::*;

use crate::boxgeom::BoxCxCyWh;
use crate::data::{normalize, DatasetSpec, Scene};
use crate::decoder::DetectionSet;
use crate::error::Result;
use crate::model::Deco;
use crate::params::ParamStore;

/// All N predictions of one image as records, each labelled with its best
/// real class. Nothing is thresholded or suppressed.
pub fn detections_from_set(image_id: u64, set: &DetectionSet, width: usize, height: usize) -> Vec<DetectionRecord> {
    (0..set.len())
        .map(|i| {
            let (class, score) = set.top_class(i);
            let b = set.bbox(i).map(|v| v as f64);
            DetectionRecord {
                image_id,
                class,
                score,
                bbox: BoxCxCyWh::from_array(b).to_xyxy().scale(width as f64, height as f64),
            }
        })
        .collect()
}

pub fn ground_truth_records(scenes: &[Scene]) -> Vec<GtRecord> {
    scenes
        .iter()
        .flat_map(|s| {
            let (w, h) = (s.width() as f64, s.height() as f64);
            s.objects.iter().map(move |g| GtRecord {
                image_id: s.id,
                class: g.class,
                bbox: g.bbox.to_xyxy().scale(w, h),
            })
        })
        .collect()
}

/// Run the detector over `scenes` (in parallel; the store is read-only).
pub fn predict_scenes(model: &Deco, store: &ParamStore<f32>, scenes: &[Scene], spec: &DatasetSpec) -> Result<Vec<DetectionSet>> {
    scenes
        .par_iter()
        .map(|s| model.predict(store, normalize(&s.image, spec.mean, spec.std)))
        .collect()
}

/// Predict and score `scenes`.
pub fn evaluate_model(model: &Deco, store: &ParamStore<f32>, scenes: &[Scene], spec: &DatasetSpec) -> Result<EvalReport> {
    let sets = predict_scenes(model, store, scenes, spec)?;
    let dets: Vec<DetectionRecord> = scenes
        .iter()
        .zip(&sets)
        .flat_map(|(s, set)| detections_from_set(s.id, set, s.width(), s.height()))
        .collect();
    Ok(evaluate_ap(&dets, &ground_truth_records(scenes), &coco_thresholds()))
}
