//! Randomized invariants checked against independent oracles.

use deco_core::autograd::{ConvGeom, ResizeMode, Tape};
use deco_core::boxgeom::{giou, iou, BoxCxCyWh, BoxXyxy};
use deco_core::criterion::set_prediction_loss;
use deco_core::decoder::DetectionVars;
use deco_core::eval::{coco_thresholds, evaluate_ap, greedy_match, DetectionRecord, GtRecord, MatchLabel};
use deco_core::matching::{hungarian_assign, hungarian_bruteforce, CostMatrix, CostWeights, GroundTruth};
use deco_core::Tensor;
use proptest::prelude::*;

fn xyxy() -> impl Strategy<Value = BoxXyxy> {
    (0.0..50.0f64, 0.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64).prop_map(|(x, y, w, h)| BoxXyxy::new(x, y, x + w, y + h))
}

fn int_box() -> impl Strategy<Value = [i64; 4]> {
    (0..16i64, 0..16i64, 1..10i64, 1..10i64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

/// GIoU by counting unit cells; exact for integer boxes.
fn raster_giou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0i64, 0i64);
    let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
    let mut enclose = 0i64;
    for y in hull[1]..hull[3] {
        for x in hull[0]..hull[2] {
            enclose += 1;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i64;
            union += (ia || ib) as i64;
        }
    }
    inter as f64 / union as f64 - (enclose - union) as f64 / enclose as f64
}

fn to_box(r: [i64; 4]) -> BoxXyxy {
    BoxXyxy::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64)
}

fn cost_matrix(max_n: usize) -> impl Strategy<Value = CostMatrix> {
    (1..=max_n)
        .prop_flat_map(|n| (Just(n), 1..=n))
        .prop_flat_map(|(n, m)| (Just(n), Just(m), proptest::collection::vec(-5.0..5.0f64, n * m)))
        .prop_map(|(n, m, data)| CostMatrix::new(n, m, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn giou_is_bounded_symmetric_and_below_iou(a in xyxy(), b in xyxy()) {
        let ab = giou(a, b);
        let ba = giou(b, a);
        prop_assert!((-1.0..=1.0).contains(&ab.giou));
        prop_assert!(ab.giou <= ab.iou);
        prop_assert_eq!(ab.giou.to_bits(), ba.giou.to_bits());
        prop_assert!((ab.iou - iou(a, b)).abs() < 1e-15);
    }

    #[test]
    fn giou_matches_raster_oracle(a in int_box(), b in int_box()) {
        let g = giou(to_box(a), to_box(b)).giou;
        prop_assert!((g - raster_giou(a, b)).abs() < 1e-12, "{} vs {}", g, raster_giou(a, b));
    }

    #[test]
    fn giou_of_box_with_itself_is_one(a in xyxy()) {
        prop_assert!((giou(a, a).giou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_bruteforce(c in cost_matrix(7)) {
        let fast = hungarian_assign(&c).unwrap();
        let slow = hungarian_bruteforce(&c).unwrap();
        prop_assert!((fast.total_cost - slow.total_cost).abs() < 1e-9);
        let mut preds: Vec<usize> = fast.pairs.iter().map(|&(_, p)| p).collect();
        preds.sort_unstable();
        preds.dedup();
        prop_assert_eq!(preds.len(), c.cols());
    }

    #[test]
    fn row_shift_keeps_assignment(c in cost_matrix(6), shift in proptest::collection::vec(-3.0..3.0f64, 6)) {
        // Adding a constant to one ground truth's column shifts every
        // complete assignment equally.
        let mut shifted = c.clone();
        for col in 0..c.cols() {
            for row in 0..c.rows() {
                shifted.set(row, col, c.get(row, col) + shift[col]);
            }
        }
        let a = hungarian_bruteforce(&c).unwrap();
        let b = hungarian_bruteforce(&shifted).unwrap();
        let total: f64 = shift[..c.cols()].iter().sum();
        prop_assert!((b.total_cost - a.total_cost - total).abs() < 1e-9);
    }

    #[test]
    fn conv_same_padding_preserves_spatial(c in 1usize..4, h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::ones(&[c, h, w]));
        let wt = t.constant(Tensor::ones(&[c, 1, k, k]));
        let y = t.conv2d(x, wt, None, ConvGeom::new(1, k / 2, c)).unwrap();
        prop_assert_eq!(t.shape(y), &[c, h, w]);
    }

    #[test]
    fn softmax_xent_is_nonnegative(logits in proptest::collection::vec(-30.0..30.0f64, 12), t0 in 0usize..4, t1 in 0usize..4, t2 in 0usize..4) {
        let mut t = Tape::<f64>::new();
        let l = t.constant(Tensor::from_vec(&[3, 4], logits).unwrap());
        let loss = t.softmax_xent(l, &[t0, t1, t2], Some(&[1.0, 1.0, 1.0, 0.1])).unwrap();
        prop_assert!(t.scalar(loss) >= 0.0);
    }

    #[test]
    fn resize_then_pool_of_constant_is_constant(v in -5.0..5.0f64, h in 1usize..7, w in 1usize..7, oh in 1usize..9, ow in 1usize..9) {
        for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::full(&[2, h, w], v));
            let r = t.resize(x, oh, ow, mode).unwrap();
            let p = t.adaptive_max_pool_to(r, h, w).unwrap();
            prop_assert!(t.value(p).iter().all(|&y| (y - v).abs() < 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_loss(xs in proptest::collection::vec(-2.0..2.0f64, 12), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        // d(a f + b g) = a df + b dg
        let x = Tensor::from_vec(&[3, 4], xs).unwrap();
        let grad = |ca: f64, cb: f64| {
            let mut t = Tape::<f64>::new();
            let v = t.leaf(x.clone(), true);
            let f = t.gelu(v);
            let f = t.sum(f);
            let g = t.sigmoid(v);
            let g = t.mean(g);
            let fa = t.scale(f, ca);
            let gb = t.scale(g, cb);
            let s = t.add(fa, gb).unwrap();
            t.backward(s).unwrap().wrt(v).unwrap().to_vec()
        };
        let (gf, gg, gab) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..12 {
            prop_assert!((gab[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn set_loss_ignores_prediction_and_target_order(seed in any::<u64>()) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, k1) = (6usize, 4usize);
        let m = rng.random_range(0..=4usize);
        let logits: Vec<f64> = (0..n * k1).map(|_| rng.random_range(-3.0..3.0)).collect();
        let boxes: Vec<f64> = (0..n * 4).map(|_| rng.random_range(0.2..0.8)).collect();
        let gts: Vec<GroundTruth> = (0..m)
            .map(|_| GroundTruth {
                class: rng.random_range(0..3),
                bbox: BoxCxCyWh::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)),
            })
            .collect();
        let loss = |perm: &[usize], gts: &[GroundTruth]| {
            let mut t = Tape::<f64>::new();
            let l: Vec<f64> = perm.iter().flat_map(|&i| logits[i * k1..(i + 1) * k1].to_vec()).collect();
            let b: Vec<f64> = perm.iter().flat_map(|&i| boxes[i * 4..(i + 1) * 4].to_vec()).collect();
            let det = DetectionVars {
                logits: t.constant(Tensor::from_vec(&[n, k1], l).unwrap()),
                boxes: t.constant(Tensor::from_vec(&[n, 4], b).unwrap()),
            };
            set_prediction_loss(&mut t, &[det], gts, &CostWeights::default()).unwrap().breakdown.total
        };
        let base = loss(&(0..n).collect::<Vec<_>>(), &gts);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = gts.clone();
        shuffled.shuffle(&mut rng);
        let moved = loss(&perm, &shuffled);
        prop_assert!((moved - base).abs() <= 1e-6 * base.abs().max(1e-12), "{} vs {}", base, moved);
    }
}

fn det(image_id: u64, score: f64, b: BoxXyxy) -> DetectionRecord {
    DetectionRecord { image_id, class: 0, score, bbox: b }
}

/// COCO matching written from the definition: walk detections by
/// descending score, each claiming the free ground truth of highest IoU.
fn oracle_match(dets: &[BoxXyxy], gts: &[BoxXyxy], thr: f64) -> Vec<Option<usize>> {
    let mut free: Vec<usize> = (0..gts.len()).collect();
    dets.iter()
        .map(|d| {
            let best = free
                .iter()
                .copied()
                .filter(|&g| iou(*d, gts[g]) >= thr)
                .fold(None, |acc: Option<usize>, g| match acc {
                    Some(a) if iou(*d, gts[a]) >= iou(*d, gts[g]) => Some(a),
                    _ => Some(g),
                });
            if let Some(g) = best {
                free.retain(|&x| x != g);
            }
            best
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn greedy_match_agrees_with_oracle(dets in proptest::collection::vec(xyxy(), 0..8), gts in proptest::collection::vec(xyxy(), 0..6), thr in prop::sample::select(coco_thresholds())) {
        let got = greedy_match(&dets, &gts, &vec![false; gts.len()], thr);
        let want = oracle_match(&dets, &gts, thr);
        for ((label, g), w) in got.iter().zip(&want) {
            prop_assert_eq!(*g, *w);
            prop_assert_eq!(*label == MatchLabel::TruePositive, w.is_some());
        }
    }

    #[test]
    fn ap_depends_only_on_score_order(boxes in proptest::collection::vec(xyxy(), 1..8), gts in proptest::collection::vec(xyxy(), 1..5), scores in proptest::collection::vec(0.01..0.99f64, 8)) {
        let dets: Vec<DetectionRecord> = boxes.iter().zip(&scores).map(|(b, &s)| det(0, s, *b)).collect();
        let g: Vec<GtRecord> = gts.iter().map(|b| GtRecord { image_id: 0, class: 0, bbox: *b }).collect();
        let squashed: Vec<DetectionRecord> = dets.iter().map(|d| DetectionRecord { score: d.score.powi(3) * 0.5, ..*d }).collect();
        let a = evaluate_ap(&dets, &g, &coco_thresholds());
        let b = evaluate_ap(&squashed, &g, &coco_thresholds());
        prop_assert_eq!(a.ap.to_bits(), b.ap.to_bits());
        prop_assert!((0.0..=1.0).contains(&a.ap) && (0.0..=1.0).contains(&a.ap50));
        prop_assert!(a.ap50 >= a.ap75);
    }

    #[test]
    fn trailing_false_positive_leaves_ap_unchanged(gts in proptest::collection::vec(xyxy(), 1..5)) {
        // Exact hits for every ground truth, then one far-away miss scored last.
        let g: Vec<GtRecord> = gts.iter().map(|b| GtRecord { image_id: 0, class: 0, bbox: *b }).collect();
        let mut dets: Vec<DetectionRecord> = gts.iter().enumerate().map(|(i, b)| det(0, 0.9 - 0.01 * i as f64, *b)).collect();
        let perfect = evaluate_ap(&dets, &g, &coco_thresholds());
        prop_assert!((perfect.ap - 1.0).abs() < 1e-12);
        dets.push(det(0, 0.01, BoxXyxy::new(500.0, 500.0, 510.0, 510.0)));
        let with_fp = evaluate_ap(&dets, &g, &coco_thresholds());
        prop_assert!((with_fp.ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leading_false_positive_never_raises_ap(gts in proptest::collection::vec(xyxy(), 1..5)) {
        let g: Vec<GtRecord> = gts.iter().map(|b| GtRecord { image_id: 0, class: 0, bbox: *b }).collect();
        let mut dets: Vec<DetectionRecord> = gts.iter().map(|b| det(0, 0.5, *b)).collect();
        let before = evaluate_ap(&dets, &g, &coco_thresholds()).ap50;
        dets.push(det(0, 0.99, BoxXyxy::new(500.0, 500.0, 510.0, 510.0)));
        let after = evaluate_ap(&dets, &g, &coco_thresholds()).ap50;
        prop_assert!(after <= before + 1e-12);
    }
}
