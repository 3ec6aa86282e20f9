//! Procedural multi-category keypoint dataset.
//!
//! Each family is a parametric planar shape whose keypoints are its defining
//! vertices. Instances vary in rotation, size, aspect, position, fill color
//! and background noise. Families differ in keypoint count (3 to 12) so the
//! slot padding machinery is exercised.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{save_annotations, BBox, CategoryDef, ImageRef, InstanceAnnotation, Keypoint, Visibility};
use super::split::DatasetSplit;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Triangle,
    Square,
    Pentagon,
    Hexagon,
    Star5,
    Star6,
    TShape,
    Ellipse,
    Arrow,
    Cross,
    Kite,
    House,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 12] = [
        ShapeFamily::Triangle,
        ShapeFamily::Square,
        ShapeFamily::Pentagon,
        ShapeFamily::Hexagon,
        ShapeFamily::Star5,
        ShapeFamily::Star6,
        ShapeFamily::TShape,
        ShapeFamily::Ellipse,
        ShapeFamily::Arrow,
        ShapeFamily::Cross,
        ShapeFamily::Kite,
        ShapeFamily::House,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Square => "square",
            ShapeFamily::Pentagon => "pentagon",
            ShapeFamily::Hexagon => "hexagon",
            ShapeFamily::Star5 => "star5",
            ShapeFamily::Star6 => "star6",
            ShapeFamily::TShape => "t_shape",
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Arrow => "arrow",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Kite => "kite",
            ShapeFamily::House => "house",
        }
    }

    pub fn num_keypoints(self) -> usize {
        self.geometry().keypoints.len()
    }

    pub fn keypoint_names(self) -> Vec<String> {
        match self {
            ShapeFamily::Star5 | ShapeFamily::Star6 => (0..self.num_keypoints())
                .map(|i| format!("{}_{}", if i % 2 == 0 { "tip" } else { "notch" }, i / 2))
                .collect(),
            ShapeFamily::Ellipse => ["top", "right", "bottom", "left"].map(String::from).to_vec(),
            _ => (0..self.num_keypoints()).map(|i| format!("corner_{i}")).collect(),
        }
    }

    /// Outline and keypoints in unit coordinates (y down, roughly within the unit disc).
    pub fn geometry(self) -> ShapeGeometry {
        fn regular(n: usize, start_deg: f64) -> Vec<(f64, f64)> {
            (0..n)
                .map(|i| {
                    let a = (start_deg + 360.0 * i as f64 / n as f64).to_radians();
                    (a.cos(), a.sin())
                })
                .collect()
        }
        fn star(n: usize, inner: f64) -> Vec<(f64, f64)> {
            (0..2 * n)
                .map(|i| {
                    let a = (-90.0 + 180.0 * i as f64 / n as f64).to_radians();
                    let r = if i % 2 == 0 { 1.0 } else { inner };
                    (r * a.cos(), r * a.sin())
                })
                .collect()
        }
        let polygon = |pts: Vec<(f64, f64)>| ShapeGeometry {
            outline: pts.clone(),
            keypoints: pts,
        };
        match self {
            ShapeFamily::Triangle => polygon(regular(3, -90.0)),
            ShapeFamily::Square => polygon(regular(4, -135.0)),
            ShapeFamily::Pentagon => polygon(regular(5, -90.0)),
            ShapeFamily::Hexagon => polygon(regular(6, -90.0)),
            ShapeFamily::Star5 => polygon(star(5, 0.45)),
            ShapeFamily::Star6 => polygon(star(6, 0.55)),
            ShapeFamily::TShape => polygon(vec![
                (-1.0, -0.9),
                (1.0, -0.9),
                (1.0, -0.35),
                (0.3, -0.35),
                (0.3, 1.0),
                (-0.3, 1.0),
                (-0.3, -0.35),
                (-1.0, -0.35),
            ]),
            ShapeFamily::Arrow => polygon(vec![
                (0.0, -1.0),
                (0.8, -0.15),
                (0.3, -0.15),
                (0.3, 1.0),
                (-0.3, 1.0),
                (-0.3, -0.15),
                (-0.8, -0.15),
            ]),
            ShapeFamily::Cross => polygon(vec![
                (-0.3, -1.0),
                (0.3, -1.0),
                (0.3, -0.3),
                (1.0, -0.3),
                (1.0, 0.3),
                (0.3, 0.3),
                (0.3, 1.0),
                (-0.3, 1.0),
                (-0.3, 0.3),
                (-1.0, 0.3),
                (-1.0, -0.3),
                (-0.3, -0.3),
            ]),
            ShapeFamily::Kite => polygon(vec![(0.0, -1.0), (0.6, -0.35), (0.0, 1.0), (-0.6, -0.35)]),
            ShapeFamily::House => polygon(vec![(0.0, -1.0), (0.85, -0.2), (0.7, 0.95), (-0.7, 0.95), (-0.85, -0.2)]),
            ShapeFamily::Ellipse => {
                let (rx, ry) = (1.0, 0.6);
                let outline = (0..64)
                    .map(|i| {
                        let a = (i as f64 / 64.0) * std::f64::consts::TAU;
                        (rx * a.cos(), ry * a.sin())
                    })
                    .collect();
                ShapeGeometry {
                    outline,
                    keypoints: vec![(0.0, -ry), (rx, 0.0), (0.0, ry), (-rx, 0.0)],
                }
            }
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let key = match key.as_str() {
            "5_star" | "star_5" => "star5",
            "6_star" | "star_6" => "star6",
            "tshape" | "t" => "t_shape",
            other => other,
        }
        .to_string();
        ShapeFamily::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown shape family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeGeometry {
    pub outline: Vec<(f64, f64)>,
    pub keypoints: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: ShapeFamily,
    pub instances: usize,
    #[serde(default)]
    pub role: SplitRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub families: Vec<FamilySpec>,
    pub image_size: u32,
    /// Largest K the dataset must support; each family needs K + 1 instances.
    pub max_shots: usize,
    pub max_rotation_deg: f64,
    pub noise_amplitude: f64,
    pub supersample: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            families: Vec::new(),
            image_size: 96,
            max_shots: 5,
            max_rotation_deg: 20.0,
            noise_amplitude: 12.0,
            supersample: 4,
        }
    }
}

impl SynthConfig {
    pub fn with_families(families: impl IntoIterator<Item = (ShapeFamily, usize, SplitRole)>) -> Self {
        Self {
            families: families
                .into_iter()
                .map(|(family, instances, role)| FamilySpec { family, instances, role })
                .collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("at least one shape family is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for spec in &self.families {
            if !seen.insert(spec.family) {
                return Err(Error::Config(format!("family {} listed twice", spec.family)));
            }
            if spec.instances < self.max_shots + 1 {
                return Err(Error::Config(format!(
                    "family {} has {} instances; at least {} are needed for {}-shot episodes",
                    spec.family,
                    spec.instances,
                    self.max_shots + 1,
                    self.max_shots
                )));
            }
        }
        if self.image_size < 16 || self.supersample == 0 {
            return Err(Error::Config("image_size must be >= 16 and supersample >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub categories: Vec<CategoryDef>,
    pub instances: Vec<InstanceAnnotation>,
    pub split: DatasetSplit,
}

/// Per-instance drawing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapePose {
    pub center: (f64, f64),
    pub radius: f64,
    pub aspect: f64,
    pub rotation_deg: f64,
}

impl ShapePose {
    pub fn apply(&self, (ux, uy): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (x, y) = (ux * self.aspect * self.radius, uy * self.radius);
        (self.center.0 + c * x - s * y, self.center.1 + s * x + c * y)
    }
}

/// Fraction of each pixel covered by the polygon, from `n x n` subsamples.
pub fn rasterize_coverage(outline: &[(f64, f64)], width: u32, height: u32, n: usize) -> Vec<f32> {
    let mut cov = vec![0f32; (width * height) as usize];
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in outline {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let clamp = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
    let inv = 1.0 / (n * n) as f32;
    for j in clamp(y0.floor(), height)..clamp(y1.ceil() + 1.0, height) {
        for i in clamp(x0.floor(), width)..clamp(x1.ceil() + 1.0, width) {
            let mut hits = 0;
            for a in 0..n {
                for b in 0..n {
                    let px = i as f64 + (a as f64 + 0.5) / n as f64;
                    let py = j as f64 + (b as f64 + 0.5) / n as f64;
                    if point_in_polygon(px, py, outline) {
                        hits += 1;
                    }
                }
            }
            cov[(j * width + i) as usize] = hits as f32 * inv;
        }
    }
    cov
}

/// Even-odd rule.
pub fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn render_instance(
    family: ShapeFamily,
    config: &SynthConfig,
    seed: u64,
    family_index: usize,
    instance_index: usize,
) -> (RgbImage, Vec<(f64, f64)>, BBox) {
    let mut rng = rng_for(seed, &[family_index as u64, instance_index as u64]);
    let size = config.image_size as f64;
    let geometry = family.geometry();
    let radius = rng.random_range(0.26..0.36) * size;
    let aspect = rng.random_range(0.85..1.15);
    let rotation_deg = rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg);
    let margin = radius * 1.2 + 2.0;
    let center = (rng.random_range(margin..size - margin), rng.random_range(margin..size - margin));
    let pose = ShapePose {
        center,
        radius,
        aspect,
        rotation_deg,
    };

    let background: f32 = rng.random_range(40.0..215.0);
    let fill = loop {
        let c: [f32; 3] = [
            rng.random_range(0.0..255.0),
            rng.random_range(0.0..255.0),
            rng.random_range(0.0..255.0),
        ];
        if ((c[0] + c[1] + c[2]) / 3.0 - background).abs() >= 60.0 {
            break c;
        }
    };

    let outline: Vec<_> = geometry.outline.iter().map(|&p| pose.apply(p)).collect();
    let keypoints: Vec<_> = geometry.keypoints.iter().map(|&p| pose.apply(p)).collect();
    let coverage = rasterize_coverage(&outline, config.image_size, config.image_size, config.supersample);

    let amp = config.noise_amplitude as f32;
    let mut img = RgbImage::new(config.image_size, config.image_size);
    for (idx, px) in img.pixels_mut().enumerate() {
        let alpha = coverage[idx];
        let mut rgb = [0u8; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let noise = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
            let bg = background + noise;
            *out = ((1.0 - alpha) * bg + alpha * fill[c]).round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(rgb);
    }

    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &outline {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let pad = 0.1 * (x1 - x0).max(y1 - y0);
    let (x0, y0) = ((x0 - pad).max(0.0), (y0 - pad).max(0.0));
    let (x1, y1) = ((x1 + pad).min(size), (y1 + pad).min(size));
    (img, keypoints, BBox::new(x0, y0, x1 - x0, y1 - y0))
}

/// Renders the dataset into memory; images are held as [`ImageRef::Memory`].
pub fn render_synthetic(config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    config.validate()?;
    let mut categories = Vec::new();
    let mut instances = Vec::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut next_id = 1u64;
    for (fi, spec) in config.families.iter().enumerate() {
        let category_id = fi as u32 + 1;
        categories.push(CategoryDef {
            id: category_id,
            name: spec.family.name().to_string(),
            keypoint_names: spec.family.keypoint_names(),
        });
        match spec.role {
            SplitRole::Train => train.push(category_id),
            SplitRole::Val => val.push(category_id),
            SplitRole::Test => test.push(category_id),
        }
        for ii in 0..spec.instances {
            let (img, kps, bbox) = render_instance(spec.family, config, seed, fi, ii);
            instances.push(InstanceAnnotation {
                id: next_id,
                image: ImageRef::Memory(Arc::new(img)),
                image_size: (config.image_size, config.image_size),
                category_id,
                bbox,
                keypoints: kps.into_iter().map(|(x, y)| Keypoint::new(x, y, Visibility::Visible)).collect(),
            });
            next_id += 1;
        }
    }
    Ok(SynthDataset {
        categories,
        instances,
        split: DatasetSplit::new(train, val, test)?,
    })
}

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const SPLIT_FILE: &str = "split.json";
pub const IMAGE_DIR: &str = "images";

/// Writes `images/*.png`, `annotations.json` and `split.json` under `out_dir`.
/// The returned records reference the written files.
pub fn generate_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>, seed: u64) -> Result<SynthDataset> {
    let out_dir = out_dir.as_ref();
    let mut data = render_synthetic(config, seed)?;
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for inst in &mut data.instances {
        let path = image_dir.join(format!("{:06}.png", inst.id));
        if let ImageRef::Memory(img) = &inst.image {
            img.save(&path)?;
        }
        inst.image = ImageRef::Path(path);
    }
    save_annotations(out_dir.join(ANNOTATION_FILE), &data.categories, &data.instances)?;
    data.split.save(out_dir.join(SPLIT_FILE))?;
    Ok(data)
}
