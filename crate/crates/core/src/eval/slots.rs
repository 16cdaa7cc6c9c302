use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::decoder::DetectionSet;

pub const SLOT_CSV_HEADER: &str = "slot,cx,cy,w,h,class,conf";

/// One retained prediction; coordinates are normalized to the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotRow {
    pub slot: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
    pub conf: f64,
}

/// Every prediction whose best real-class probability reaches `threshold`,
/// in image order then slot order.
pub fn export_query_slots(sets: &[DetectionSet], threshold: f64) -> Vec<SlotRow> {
    let mut rows = Vec::new();
    for set in sets {
        for slot in 0..set.len() {
            let (class, conf) = set.top_class(slot);
            if conf < threshold {
                continue;
            }
            let [cx, cy, w, h] = set.bbox(slot).map(|v| v as f64);
            rows.push(SlotRow {
                slot,
                cx,
                cy,
                w,
                h,
                class,
                conf,
            });
        }
    }
    rows
}

pub fn write_slots_csv(rows: &[SlotRow]) -> String {
    let mut s = format!("{SLOT_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            r.slot, r.cx, r.cy, r.w, r.h, r.class, r.conf
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotCentroid {
    pub slot: usize,
    pub cx: f64,
    pub cy: f64,
    pub count: usize,
}

/// Mean predicted centre per slot.
pub fn slot_centroids(rows: &[SlotRow]) -> Vec<SlotCentroid> {
    let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.slot).or_default();
        e.0 += r.cx;
        e.1 += r.cy;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(slot, (x, y, n))| SlotCentroid {
            slot,
            cx: x / n as f64,
            cy: y / n as f64,
            count: n,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn centroids_average_per_slot() {
        let set = DetectionSet {
            logits: Tensor::from_vec(&[2, 2], vec![5.0, 0.0, 5.0, 0.0]).unwrap(),
            boxes: Tensor::from_vec(&[2, 4], vec![0.2, 0.4, 0.1, 0.1, 0.6, 0.8, 0.1, 0.1]).unwrap(),
        };
        let other = DetectionSet {
            boxes: Tensor::from_vec(&[2, 4], vec![0.4, 0.6, 0.1, 0.1, 0.6, 0.8, 0.1, 0.1]).unwrap(),
            ..set.clone()
        };
        let rows = export_query_slots(&[set, other], 0.0);
        assert_eq!(rows.len(), 4);
        let c = slot_centroids(&rows);
        assert!((c[0].cx - 0.3).abs() < 1e-6 && (c[0].cy - 0.5).abs() < 1e-6);
        assert_eq!(c[1].count, 2);
        assert!(write_slots_csv(&rows).starts_with("slot,cx,cy,w,h,class,conf\n0,0.2"));
    }
}
