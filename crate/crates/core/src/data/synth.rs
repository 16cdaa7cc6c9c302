use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{DatasetSpec, Scene};
use crate::boxgeom::{iou, BoxXyxy};
use crate::matching::GroundTruth;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle];

    pub fn from_class(class: usize) -> ShapeKind {
        Self::ALL[class]
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            ShapeKind::Disk => [0.9, 0.25, 0.2],
            ShapeKind::Square => [0.2, 0.8, 0.3],
            ShapeKind::Triangle => [0.25, 0.35, 0.95],
        }
    }

    /// Whether the pixel centre `(px, py)` lies inside a shape of nominal
    /// size `s` anchored at top-left `(x0, y0)`.
    fn contains(self, x0: f64, y0: f64, s: f64, px: f64, py: f64) -> bool {
        let (u, v) = ((px - x0) / s, (py - y0) / s);
        match self {
            ShapeKind::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Square => (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v),
            // apex at (0.5, 0), base along v = 1
            ShapeKind::Triangle => (0.0..1.0).contains(&v) && (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

struct Placed {
    kind: ShapeKind,
    x0: f64,
    y0: f64,
    size: f64,
    color: [f64; 3],
    /// Tight pixel box of the shape's own mask, half-open.
    pixels: [usize; 4],
}

fn mask_box(kind: ShapeKind, x0: f64, y0: f64, s: f64, w: usize, h: usize) -> Option<[usize; 4]> {
    let xs = (x0.floor().max(0.0) as usize)..((x0 + s).ceil() as usize + 1).min(w);
    let ys = (y0.floor().max(0.0) as usize)..((y0 + s).ceil() as usize + 1).min(h);
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in ys {
        for x in xs.clone() {
            if kind.contains(x0, y0, s, x as f64 + 0.5, y as f64 + 0.5) {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    (x1 != usize::MAX).then_some([x1, y1, x2, y2])
}

fn to_xyxy(p: [usize; 4]) -> BoxXyxy {
    BoxXyxy::new(p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64)
}

const MIN_BOX_PIXELS: usize = 4;
const PLACEMENT_TRIES: usize = 200;

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Render scene `index` of `spec`. Pure in `(spec, index)`.
pub fn generate_scene(spec: &DatasetSpec, index: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (h, w) = (spec.height(), spec.width());
    let count = rng.random_range(spec.objects[0]..=spec.objects[1]);

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::from_class(rng.random_range(0..spec.num_classes));
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
        let base = kind.color();
        let color = std::array::from_fn(|c| base[c] + jitter[c]);
        // Fall back to the least-overlapping candidate when the scene is crowded.
        let mut best: Option<(f64, Placed)> = None;
        for _ in 0..PLACEMENT_TRIES {
            let size = rng.random_range(spec.size_range[0]..=spec.size_range[1]) as f64;
            let x0 = rng.random_range(1.0..(w as f64 - size - 1.0));
            let y0 = rng.random_range(1.0..(h as f64 - size - 1.0));
            let Some(pixels) = mask_box(kind, x0, y0, size, w, h) else {
                continue;
            };
            if pixels[2] - pixels[0] < MIN_BOX_PIXELS || pixels[3] - pixels[1] < MIN_BOX_PIXELS {
                continue;
            }
            let overlap = placed
                .iter()
                .map(|p| iou(to_xyxy(p.pixels), to_xyxy(pixels)))
                .fold(0.0, f64::max);
            let cand = Placed {
                kind,
                x0,
                y0,
                size,
                color,
                pixels,
            };
            let done = overlap <= spec.max_overlap;
            if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
                best = Some((overlap, cand));
            }
            if done {
                break;
            }
        }
        if let Some((_, p)) = best {
            placed.push(p);
        }
    }

    let background: f64 = rng.random_range(0.3..0.6);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let n: f64 = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..spec.noise)
            } else {
                0.0
            };
            let mut rgb = [background + n; 3];
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for p in &placed {
                if x >= p.pixels[0] && x < p.pixels[2] && y >= p.pixels[1] && y < p.pixels[3]
                    && p.kind.contains(p.x0, p.y0, p.size, px, py)
                {
                    rgb = std::array::from_fn(|c| p.color[c] + 0.5 * n);
                }
            }
            for c in 0..3 {
                data[c * plane + y * w + x] = quantize(rgb[c]);
            }
        }
    }

    let objects = placed
        .iter()
        .map(|p| GroundTruth {
            class: ShapeKind::ALL.iter().position(|&k| k == p.kind).expect("known kind"),
            bbox: to_xyxy(p.pixels)
                .scale(1.0 / w as f64, 1.0 / h as f64)
                .to_cxcywh()
                .expect("mask boxes have positive extent"),
        })
        .collect();
    Scene {
        id: index,
        image: Tensor::from_vec(&[3, h, w], data).expect("sized above"),
        objects,
    }
}

/// All `spec.count` scenes, rendered in parallel; order is by index.
pub fn generate_dataset(spec: &DatasetSpec) -> Vec<Scene> {
    (0..spec.count as u64).into_par_iter().map(|i| generate_scene(spec, i)).collect()
}
