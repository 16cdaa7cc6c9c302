//! Synthetic shapes dataset and COCO-subset annotation I/O.

mod coco;
mod synth;

pub use coco::{
    load_image, read_annotations, read_dataset, write_dataset, CocoAnnotation, CocoCategory, CocoFile, CocoImage, CocoResult,
    ANNOTATION_FILE, IMAGE_DIR,
};
pub use synth::{generate_dataset, generate_scene, ShapeKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::GroundTruth;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    /// Training scenes.
    pub count: usize,
    /// Held-out scenes, generated from a separate seed stream.
    pub val_count: usize,
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    /// Number of shape classes used (disk, square, triangle), 1 to 3.
    pub num_classes: usize,
    /// Inclusive `[min, max]` objects per scene.
    pub objects: [usize; 2],
    /// Inclusive `[min, max]` nominal shape size in pixels.
    pub size_range: [usize; 2],
    /// Largest IoU allowed between two placed shapes.
    pub max_overlap: f64,
    /// Amplitude of the uniform per-pixel background noise.
    pub noise: f64,
    /// Per-channel normalization constants.
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Random horizontal flip during training.
    pub hflip: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            count: 5000,
            val_count: 500,
            image_size: [128, 128],
            num_classes: 3,
            objects: [1, 4],
            size_range: [16, 40],
            max_overlap: 0.1,
            noise: 0.08,
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
            hflip: true,
        }
    }
}

/// Seed offset separating the held-out stream from the training stream.
const VAL_SEED_SALT: u64 = 0x5EED_0F_F5E7;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(1..=ShapeKind::ALL.len()).contains(&self.num_classes) {
            return err(format!("data.num_classes must be 1..=3 shape types, got {}", self.num_classes));
        }
        if self.objects[0] > self.objects[1] {
            return err(format!("data.objects range {:?} is reversed", self.objects));
        }
        let [lo, hi] = self.size_range;
        if lo < 6 || lo > hi {
            return err(format!("data.size_range {:?} must satisfy 6 <= min <= max", self.size_range));
        }
        let [h, w] = self.image_size;
        if hi + 2 > h.min(w) {
            return err(format!("data.size_range max {hi} does not fit a {h}x{w} image"));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return err(format!("data.max_overlap {} outside [0, 1]", self.max_overlap));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return err(format!("data.noise {} outside [0, 0.5)", self.noise));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return err("data.std entries must be positive".into());
        }
        Ok(())
    }

    /// The held-out split: same layout, disjoint seed stream, `val_count` scenes.
    pub fn held_out(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed ^ VAL_SEED_SALT,
            count: self.val_count,
            ..self.clone()
        }
    }

    pub fn height(&self) -> usize {
        self.image_size[0]
    }

    pub fn width(&self) -> usize {
        self.image_size[1]
    }
}

/// One image with its annotations. Pixel values lie in `[0, 1]` and are
/// multiples of 1/255, so PNG storage is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    pub objects: Vec<GroundTruth>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Mirror left-right; boxes follow.
    pub fn hflip(&self) -> Scene {
        let (h, w) = (self.height(), self.width());
        let src = self.image.data();
        let mut data = vec![0.0f32; src.len()];
        for c in 0..3 {
            for y in 0..h {
                let row = (c * h + y) * w;
                for x in 0..w {
                    data[row + x] = src[row + w - 1 - x];
                }
            }
        }
        let objects = self
            .objects
            .iter()
            .map(|g| {
                let mut g = *g;
                g.bbox.cx = 1.0 - g.bbox.cx;
                g
            })
            .collect();
        Scene {
            id: self.id,
            image: Tensor::from_vec(self.image.shape(), data).expect("same shape"),
            objects,
        }
    }
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(image: &Tensor<f32>, mean: [f32; 3], std: [f32; 3]) -> Tensor<f32> {
    let plane = image.numel() / 3;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            (v - mean[c]) / std[c]
        })
        .collect();
    Tensor::from_vec(image.shape(), data).expect("same shape")
}
