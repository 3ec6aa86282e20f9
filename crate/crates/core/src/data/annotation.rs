//! COCO-style keypoint annotations.
//!
//! Files hold three top-level arrays: `categories` (with ordered keypoint
//! names), `images` and `annotations`. Keypoints are flat `[x, y, v, ...]`
//! triplets where `v` is 0 (unlabeled), 1 (labeled but occluded) or
//! 2 (visible). An annotation without `bbox` uses the whole image.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: u32,
    pub name: String,
    pub keypoint_names: Vec<String>,
}

impl CategoryDef {
    pub fn num_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoint_names.is_empty() {
            return Err(Error::Validation(format!(
                "category {} ({}) has no keypoints",
                self.id, self.name
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.keypoint_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Validation(format!(
                    "category {} ({}) repeats keypoint name {name:?}",
                    self.id, self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Visibility {
    Unlabeled = 0,
    Occluded = 1,
    Visible = 2,
}

impl Visibility {
    pub fn from_flag(v: f64) -> Option<Self> {
        match v {
            v if v == 0.0 => Some(Visibility::Unlabeled),
            v if v == 1.0 => Some(Visibility::Occluded),
            v if v == 2.0 => Some(Visibility::Visible),
            _ => None,
        }
    }

    /// Labeled keypoints (v > 0) are supervised and evaluated.
    pub fn is_labeled(self) -> bool {
        self != Visibility::Unlabeled
    }

    pub fn flag(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: Visibility,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: Visibility) -> Self {
        Self { x, y, v }
    }
}

/// Axis-aligned box in pixels, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn full_image(width: u32, height: u32) -> Self {
        Self::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn longest_side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0) || !self.w.is_finite() || !self.h.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image: ImageRef,
    pub image_size: (u32, u32),
    pub category_id: u32,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

impl InstanceAnnotation {
    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.v.is_labeled()).count()
    }

    /// Checks the record against its category definition.
    pub fn validate(&self, category: &CategoryDef) -> Result<()> {
        let record = format!("annotation id={}", self.id);
        if self.bbox.is_degenerate() {
            return Err(Error::Validation(format!(
                "{record}: bounding box must have positive width and height, got {:?}",
                self.bbox
            )));
        }
        if self.keypoints.len() != category.num_keypoints() {
            return Err(Error::Validation(format!(
                "{record}: {} keypoints but category {} defines {}",
                self.keypoints.len(),
                category.id,
                category.num_keypoints()
            )));
        }
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        for (j, kp) in self.keypoints.iter().enumerate() {
            if kp.v.is_labeled() && !(kp.x >= 0.0 && kp.x <= w && kp.y >= 0.0 && kp.y <= h) {
                return Err(Error::Validation(format!(
                    "{record}: keypoint {j} at ({}, {}) lies outside the {}x{} image",
                    kp.x, kp.y, self.image_size.0, self.image_size.1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub categories: Vec<CategoryDef>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    pub keypoints: Vec<f64>,
}

/// Reads an annotation file; image paths are resolved against its directory.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<(Vec<CategoryDef>, Vec<InstanceAnnotation>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        record: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve(file, base)
}

/// Converts the raw file records into validated instances.
pub fn resolve(file: AnnotationFile, base_dir: &Path) -> Result<(Vec<CategoryDef>, Vec<InstanceAnnotation>)> {
    let mut categories = BTreeMap::new();
    for cat in &file.categories {
        cat.validate()?;
        if categories.insert(cat.id, cat).is_some() {
            return Err(Error::Parse {
                record: format!("category id={}", cat.id),
                message: "duplicate category id".into(),
            });
        }
    }
    let mut images = HashMap::new();
    for img in &file.images {
        if images.insert(img.id, img).is_some() {
            return Err(Error::Parse {
                record: format!("image id={}", img.id),
                message: "duplicate image id".into(),
            });
        }
    }

    let mut instances = Vec::with_capacity(file.annotations.len());
    let mut seen = HashSet::new();
    for ann in &file.annotations {
        let record = format!("annotation id={}", ann.id);
        if !seen.insert(ann.id) {
            return Err(Error::Parse {
                record,
                message: "duplicate annotation id".into(),
            });
        }
        let category = categories.get(&ann.category_id).ok_or_else(|| Error::Parse {
            record: record.clone(),
            message: format!("unknown category_id {}", ann.category_id),
        })?;
        let image = images.get(&ann.image_id).ok_or_else(|| Error::Parse {
            record: record.clone(),
            message: format!("unknown image_id {}", ann.image_id),
        })?;
        if ann.keypoints.len() % 3 != 0 {
            return Err(Error::Validation(format!(
                "{record}: keypoints array has {} numbers, not a multiple of 3",
                ann.keypoints.len()
            )));
        }
        let keypoints = ann
            .keypoints
            .chunks_exact(3)
            .enumerate()
            .map(|(j, t)| {
                let v = Visibility::from_flag(t[2]).ok_or_else(|| {
                    Error::Validation(format!("{record}: keypoint {j} has visibility {} (expected 0, 1 or 2)", t[2]))
                })?;
                Ok(Keypoint::new(t[0], t[1], v))
            })
            .collect::<Result<Vec<_>>>()?;
        let bbox = match ann.bbox {
            Some([x, y, w, h]) => BBox::new(x, y, w, h),
            None => BBox::full_image(image.width, image.height),
        };
        let instance = InstanceAnnotation {
            id: ann.id,
            image: ImageRef::Path(base_dir.join(&image.file)),
            image_size: (image.width, image.height),
            category_id: ann.category_id,
            bbox,
            keypoints,
        };
        instance.validate(category)?;
        instances.push(instance);
    }
    Ok((file.categories, instances))
}

/// Builds the file representation. Each instance gets its own image record
/// whose path is made relative to `base_dir` when possible; in-memory images
/// are referenced as `<image id>.png`.
pub fn to_annotation_file(
    categories: &[CategoryDef],
    instances: &[InstanceAnnotation],
    base_dir: &Path,
) -> AnnotationFile {
    let mut images: Vec<ImageRecord> = Vec::new();
    let mut by_path: HashMap<String, u64> = HashMap::new();
    let mut annotations = Vec::with_capacity(instances.len());
    for inst in instances {
        let file = match &inst.image {
            ImageRef::Path(p) => p
                .strip_prefix(base_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/"),
            ImageRef::Memory(_) => format!("{}.png", inst.id),
        };
        let image_id = *by_path.entry(file.clone()).or_insert_with(|| {
            let id = images.len() as u64 + 1;
            images.push(ImageRecord {
                id,
                file,
                width: inst.image_size.0,
                height: inst.image_size.1,
            });
            id
        });
        annotations.push(AnnotationRecord {
            id: inst.id,
            image_id,
            category_id: inst.category_id,
            bbox: Some([inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h]),
            keypoints: inst
                .keypoints
                .iter()
                .flat_map(|k| [k.x, k.y, k.v.flag() as f64])
                .collect(),
        });
    }
    AnnotationFile {
        categories: categories.to_vec(),
        images,
        annotations,
    }
}

pub fn save_annotations(
    path: impl AsRef<Path>,
    categories: &[CategoryDef],
    instances: &[InstanceAnnotation],
) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = to_annotation_file(categories, instances, base);
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Decoded-image cache shared by samplers and predictors.
#[derive(Debug, Default)]
pub struct ImageStore {
    cache: Mutex<HashMap<PathBuf, Arc<RgbImage>>>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, image: &ImageRef) -> Result<Arc<RgbImage>> {
        match image {
            ImageRef::Memory(img) => Ok(img.clone()),
            ImageRef::Path(path) => {
                if let Some(img) = self.cache.lock().expect("image cache poisoned").get(path) {
                    return Ok(img.clone());
                }
                let img = Arc::new(
                    image::open(path)
                        .map_err(|e| match e {
                            image::ImageError::IoError(io) => Error::io(path, io),
                            other => Error::Image(other),
                        })?
                        .to_rgb8(),
                );
                self.cache
                    .lock()
                    .expect("image cache poisoned")
                    .insert(path.clone(), img.clone());
                Ok(img)
            }
        }
    }

    pub fn preload(&self, instances: &[InstanceAnnotation]) -> Result<()> {
        for inst in instances {
            self.get(&inst.image)?;
        }
        Ok(())
    }
}
