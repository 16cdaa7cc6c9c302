use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::boxgeom::{iou, BoxXyxy};

/// One scored detection in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub class: usize,
    /// Highest real-class softmax probability.
    pub score: f64,
    pub bbox: BoxXyxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GtRecord {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BoxXyxy,
}

/// IoU thresholds .50:.05:.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const MAX_DETECTIONS: usize = 100;
const RECALL_POINTS: usize = 101;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..LARGE_AREA).contains(&area),
            AreaRange::Large => area >= LARGE_AREA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    /// Matched an out-of-range ground truth, or is itself out of range.
    Ignored,
}

/// Greedy COCO matching for one image and class at one threshold.
///
/// `dets` must already be sorted by descending score. Each detection takes
/// the unmatched in-range ground truth with the highest IoU at or above
/// `threshold` (first one on ties); later duplicates become false positives.
pub fn greedy_match(dets: &[BoxXyxy], gts: &[BoxXyxy], gt_ignored: &[bool], threshold: f64) -> Vec<(MatchLabel, Option<usize>)> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            // in-range ground truths win over ignored ones
            for pass_ignored in [false, true] {
                for (j, g) in gts.iter().enumerate() {
                    if taken[j] || gt_ignored[j] != pass_ignored {
                        continue;
                    }
                    let o = iou(*d, *g);
                    if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                        best = Some((j, o));
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    let label = if gt_ignored[j] {
                        MatchLabel::Ignored
                    } else {
                        MatchLabel::TruePositive
                    };
                    (label, Some(j))
                }
                None => (MatchLabel::FalsePositive, None),
            }
        })
        .collect()
}

/// Area under the 101-point interpolated precision envelope.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &t in tp {
        if t {
            ntp += 1;
        } else {
            nfp += 1;
        }
        precision.push(ntp as f64 / (ntp + nfp) as f64);
        recall.push(ntp as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean over thresholds .50:.05:.95 and over classes with ground truth.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `(class, AP)` for every class with ground truth.
    pub per_class: Vec<(usize, f64)>,
    /// Present only when some ground truth falls in the range.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// Fraction of ground truth matched at IoU 0.5 using every detection.
    pub recall50: f64,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_ground_truth: usize,
}

impl EvalReport {
    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("ap".to_string(), format!("{:.6}", self.ap)),
            ("ap50".into(), format!("{:.6}", self.ap50)),
            ("ap75".into(), format!("{:.6}", self.ap75)),
        ];
        for (name, v) in [("ap_small", self.ap_small), ("ap_medium", self.ap_medium), ("ap_large", self.ap_large)] {
            if let Some(v) = v {
                rows.push((name.into(), format!("{v:.6}")));
            }
        }
        rows.push(("recall50".into(), format!("{:.6}", self.recall50)));
        for (c, v) in &self.per_class {
            rows.push((format!("ap_class{c}"), format!("{v:.6}")));
        }
        rows.push(("images".into(), self.num_images.to_string()));
        rows.push(("detections".into(), self.num_detections.to_string()));
        rows.push(("ground_truth".into(), self.num_ground_truth.to_string()));
        rows
    }

    /// `key=value` per line.
    pub fn to_key_value(&self) -> String {
        self.rows().into_iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}

/// Keep the `MAX_DETECTIONS` highest-scoring detections per image, in
/// descending score order (stable on ties).
fn cap_per_image(dets: &[DetectionRecord]) -> Vec<DetectionRecord> {
    let mut by_image: BTreeMap<u64, Vec<DetectionRecord>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(*d);
    }
    let mut out = Vec::with_capacity(dets.len());
    for (_, mut v) in by_image {
        v.sort_by(|a, b| b.score.total_cmp(&a.score));
        v.truncate(MAX_DETECTIONS);
        out.extend(v);
    }
    out
}

struct ClassData<'a> {
    dets: Vec<&'a DetectionRecord>,
    gts: HashMap<u64, Vec<&'a GtRecord>>,
}

fn average_precision(class: &ClassData, threshold: f64, range: AreaRange) -> Option<f64> {
    let num_gt = class.gts.values().flatten().filter(|g| range.contains(g.bbox.area())).count();
    if num_gt == 0 {
        return None;
    }
    // matching is per image, then the labelled detections are pooled in score order
    let mut labels: Vec<(f64, usize, MatchLabel)> = Vec::with_capacity(class.dets.len());
    let mut per_image: BTreeMap<u64, Vec<(usize, &DetectionRecord)>> = BTreeMap::new();
    for (order, d) in class.dets.iter().enumerate() {
        per_image.entry(d.image_id).or_default().push((order, d));
    }
    for (image, dets) in per_image {
        let gts: Vec<BoxXyxy> = class.gts.get(&image).map_or(Vec::new(), |g| g.iter().map(|g| g.bbox).collect());
        let ignored: Vec<bool> = gts.iter().map(|g| !range.contains(g.area())).collect();
        let boxes: Vec<BoxXyxy> = dets.iter().map(|(_, d)| d.bbox).collect();
        for ((order, d), (label, _)) in dets.iter().zip(greedy_match(&boxes, &gts, &ignored, threshold)) {
            let label = if label == MatchLabel::FalsePositive && !range.contains(d.bbox.area()) {
                MatchLabel::Ignored
            } else {
                label
            };
            labels.push((d.score, *order, label));
        }
    }
    labels.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let tp: Vec<bool> = labels
        .iter()
        .filter(|l| l.2 != MatchLabel::Ignored)
        .map(|l| l.2 == MatchLabel::TruePositive)
        .collect();
    Some(interpolated_ap(&tp, num_gt))
}

fn group<'a>(dets: &'a [DetectionRecord], gts: &'a [GtRecord]) -> BTreeMap<usize, ClassData<'a>> {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let mut out: BTreeMap<usize, ClassData> = classes
        .iter()
        .map(|&c| {
            (
                c,
                ClassData {
                    dets: Vec::new(),
                    gts: HashMap::new(),
                },
            )
        })
        .collect();
    for g in gts {
        out.get_mut(&g.class).expect("collected").gts.entry(g.image_id).or_default().push(g);
    }
    for d in dets {
        if let Some(c) = out.get_mut(&d.class) {
            c.dets.push(d);
        }
    }
    for c in out.values_mut() {
        c.dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fraction of ground truth matched at `threshold`, class-aware, using all
/// detections (no score cut).
pub fn recall_at(dets: &[DetectionRecord], gts: &[GtRecord], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let dets = cap_per_image(dets);
    let mut matched = 0usize;
    for class in group(&dets, gts).values() {
        let mut per_image: BTreeMap<u64, Vec<BoxXyxy>> = BTreeMap::new();
        for d in &class.dets {
            per_image.entry(d.image_id).or_default().push(d.bbox);
        }
        for (image, boxes) in per_image {
            let Some(g) = class.gts.get(&image) else { continue };
            let g: Vec<BoxXyxy> = g.iter().map(|g| g.bbox).collect();
            let ignored = vec![false; g.len()];
            matched += greedy_match(&boxes, &g, &ignored, threshold)
                .iter()
                .filter(|(l, _)| *l == MatchLabel::TruePositive)
                .count();
        }
    }
    matched as f64 / gts.len() as f64
}

/// COCO-style AP. `ap` averages over `thresholds` ([`coco_thresholds`] is
/// the standard set); `ap50` and `ap75` are always computed.
pub fn evaluate_ap(dets: &[DetectionRecord], gts: &[GtRecord], thresholds: &[f64]) -> EvalReport {
    let capped = cap_per_image(dets);
    let classes = group(&capped, gts);
    let images: BTreeSet<u64> = gts.iter().map(|g| g.image_id).chain(dets.iter().map(|d| d.image_id)).collect();

    let ap_for = |range: AreaRange, t: f64| -> Option<f64> {
        let per_class: Vec<f64> = classes.values().filter_map(|c| average_precision(c, t, range)).collect();
        (!per_class.is_empty()).then(|| mean(&per_class))
    };
    let over_thresholds = |range: AreaRange| -> Option<f64> {
        let v: Vec<f64> = thresholds.iter().filter_map(|&t| ap_for(range, t)).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let per_class = classes
        .iter()
        .map(|(&c, data)| {
            let v: Vec<f64> = thresholds
                .iter()
                .filter_map(|&t| average_precision(data, t, AreaRange::All))
                .collect();
            (c, mean(&v))
        })
        .collect();
    EvalReport {
        ap: over_thresholds(AreaRange::All).unwrap_or(0.0),
        ap50: ap_for(AreaRange::All, 0.5).unwrap_or(0.0),
        ap75: ap_for(AreaRange::All, 0.75).unwrap_or(0.0),
        per_class,
        ap_small: over_thresholds(AreaRange::Small),
        ap_medium: over_thresholds(AreaRange::Medium),
        ap_large: over_thresholds(AreaRange::Large),
        recall50: recall_at(dets, gts, 0.5),
        num_images: images.len(),
        num_detections: dets.len(),
        num_ground_truth: gts.len(),
    }
}
