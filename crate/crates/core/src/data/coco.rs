use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Scene, ShapeKind};
use crate::boxgeom::{BoxCxCyWh, BoxXyxy};
use crate::error::{Error, Result};
use crate::eval::DetectionRecord;
use crate::matching::GroundTruth;
use crate::tensor::Tensor;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// 1-based; category `k` is class `k - 1`.
    pub category_id: u64,
    /// `[x, y, w, h]` in absolute pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoAnnotation {
    pub fn class(&self) -> usize {
        self.category_id as usize - 1
    }
}

pub(crate) fn pixel_bbox(b: BoxCxCyWh, width: usize, height: usize) -> [f64; 4] {
    let xy = b.to_xyxy().scale(width as f64, height as f64);
    [xy.x1, xy.y1, xy.x2 - xy.x1, xy.y2 - xy.y1]
}

fn normalized_bbox(bbox: [f64; 4], width: usize, height: usize) -> Result<BoxCxCyWh> {
    BoxXyxy::new(bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3])
        .scale(1.0 / width as f64, 1.0 / height as f64)
        .to_cxcywh()
}

fn file_name(id: u64) -> String {
    format!("{id:06}.png")
}

impl CocoFile {
    pub fn from_scenes(scenes: &[Scene], num_classes: usize) -> CocoFile {
        let mut file = CocoFile {
            categories: (0..num_classes)
                .map(|c| CocoCategory {
                    id: c as u64 + 1,
                    name: ShapeKind::from_class(c).name().to_string(),
                })
                .collect(),
            ..CocoFile::default()
        };
        let mut next_ann = 1;
        for s in scenes {
            let (w, h) = (s.width(), s.height());
            file.images.push(CocoImage {
                id: s.id,
                width: w,
                height: h,
                file_name: format!("{IMAGE_DIR}/{}", file_name(s.id)),
            });
            for g in &s.objects {
                let bbox = pixel_bbox(g.bbox, w, h);
                file.annotations.push(CocoAnnotation {
                    id: next_ann,
                    image_id: s.id,
                    category_id: g.class as u64 + 1,
                    bbox,
                    area: bbox[2] * bbox[3],
                    iscrowd: 0,
                });
                next_ann += 1;
            }
        }
        file
    }

    /// Ground truth per image id, in annotation order.
    pub fn objects_by_image(&self) -> Result<HashMap<u64, Vec<GroundTruth>>> {
        let sizes: HashMap<u64, (usize, usize)> = self.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
        let mut out: HashMap<u64, Vec<GroundTruth>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            let (w, h) = sizes[&a.image_id];
            let bbox = normalized_bbox(a.bbox, w, h).map_err(|e| Error::Coco {
                record: format!("annotation {}", a.id),
                msg: e.to_string(),
            })?;
            out.get_mut(&a.image_id).expect("checked on parse").push(GroundTruth { class: a.class(), bbox });
        }
        Ok(out)
    }

    /// Parse and check the COCO detection subset.
    pub fn parse(text: &str) -> Result<CocoFile> {
        let root: Value = serde_json::from_str(text)?;
        let root = root.as_object().ok_or_else(|| coco_err("file", "top level is not an object"))?;
        let list = |key: &str| -> Result<&Vec<Value>> {
            root.get(key)
                .and_then(Value::as_array)
                .ok_or_else(|| coco_err("file", format!("missing array `{key}`")))
        };

        let mut file = CocoFile::default();
        for (i, v) in list("categories")?.iter().enumerate() {
            let rec = format!("categories[{i}]");
            let o = object(v, &rec)?;
            file.categories.push(CocoCategory {
                id: uint(o, "id", &rec)?,
                name: o
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| coco_err(&rec, "missing string `name`"))?
                    .to_string(),
            });
        }
        for (i, v) in list("images")?.iter().enumerate() {
            let rec = format!("images[{i}]");
            let o = object(v, &rec)?;
            let rec = format!("image {}", uint(o, "id", &rec)?);
            file.images.push(CocoImage {
                id: uint(o, "id", &rec)?,
                width: uint(o, "width", &rec)? as usize,
                height: uint(o, "height", &rec)? as usize,
                file_name: o
                    .get("file_name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| coco_err(&rec, "missing string `file_name`"))?
                    .to_string(),
            });
        }
        let image_ids: HashMap<u64, ()> = file.images.iter().map(|i| (i.id, ())).collect();
        let category_ids: HashMap<u64, ()> = file.categories.iter().map(|c| (c.id, ())).collect();
        for (i, v) in list("annotations")?.iter().enumerate() {
            let rec = format!("annotations[{i}]");
            let o = object(v, &rec)?;
            let rec = format!("annotation {}", uint(o, "id", &rec)?);
            let image_id = uint(o, "image_id", &rec)?;
            if !image_ids.contains_key(&image_id) {
                return Err(coco_err(&rec, format!("references unknown image_id {image_id}")));
            }
            let category_id = uint(o, "category_id", &rec)?;
            if category_id == 0 || !category_ids.contains_key(&category_id) {
                return Err(coco_err(&rec, format!("references unknown category_id {category_id}")));
            }
            let raw = o
                .get("bbox")
                .and_then(Value::as_array)
                .filter(|a| a.len() == 4)
                .ok_or_else(|| coco_err(&rec, "missing 4-element `bbox`"))?;
            let mut bbox = [0.0; 4];
            for (slot, v) in bbox.iter_mut().zip(raw) {
                *slot = v.as_f64().ok_or_else(|| coco_err(&rec, "non-numeric bbox entry"))?;
            }
            if bbox[2] <= 0.0 || bbox[3] <= 0.0 {
                return Err(coco_err(&rec, format!("nonpositive bbox size {}x{}", bbox[2], bbox[3])));
            }
            file.annotations.push(CocoAnnotation {
                id: uint(o, "id", &rec)?,
                image_id,
                category_id,
                bbox,
                area: o.get("area").and_then(Value::as_f64).unwrap_or(bbox[2] * bbox[3]),
                iscrowd: o.get("iscrowd").and_then(Value::as_u64).unwrap_or(0) as u8,
            });
        }
        Ok(file)
    }
}

fn coco_err(record: &str, msg: impl Into<String>) -> Error {
    Error::Coco {
        record: record.to_string(),
        msg: msg.into(),
    }
}

fn object<'a>(v: &'a Value, rec: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| coco_err(rec, "not an object"))
}

fn uint(o: &Map<String, Value>, key: &str, rec: &str) -> Result<u64> {
    o.get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| coco_err(rec, format!("missing unsigned integer `{key}`")))
}

/// Write `DIR/annotations.json` and `DIR/images/*.png`.
pub fn write_dataset(dir: &Path, scenes: &[Scene], num_classes: usize) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in scenes {
        let (w, h) = (s.width(), s.height());
        let plane = w * h;
        let src = s.image.data();
        let mut rgb = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                rgb.push((src[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("buffer sized to image");
        img.save(images.join(file_name(s.id)))?;
    }
    let file = CocoFile::from_scenes(scenes, num_classes);
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string(&file)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_annotations(path: &Path) -> Result<CocoFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CocoFile::parse(&text)
}

/// Read an image file as `[3, H, W]` RGB in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// One entry of a COCO detection results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    /// 1-based, as in the annotation file.
    pub category_id: usize,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

impl From<&DetectionRecord> for CocoResult {
    fn from(d: &DetectionRecord) -> Self {
        CocoResult {
            image_id: d.image_id,
            category_id: d.class + 1,
            bbox: [d.bbox.x1, d.bbox.y1, d.bbox.width(), d.bbox.height()],
            score: d.score,
        }
    }
}

/// Load a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let file = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let mut objects = file.objects_by_image()?;
    file.images
        .iter()
        .map(|info| {
            let image = load_image(&dir.join(&info.file_name))?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            if (w, h) != (info.width, info.height) {
                return Err(coco_err(
                    &format!("image {}", info.id),
                    format!("PNG is {w}x{h}, annotation says {}x{}", info.width, info.height),
                ));
            }
            Ok(Scene {
                id: info.id,
                image,
                objects: objects.remove(&info.id).unwrap_or_default(),
            })
        })
        .collect()
}
