//! Top-down cropping: the object box is mapped onto an `S x S` input, with
//! optional scale/rotation augmentation composed into the same affine map.
//!
//! Pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)`. Heatmap coordinates are
//! input coordinates scaled by `heatmap_resolution / input_size`.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{InstanceAnnotation, Visibility};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Row-major 2x3 affine map `p -> A p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine2 {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &first.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine2 { m }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub input_size: usize,
    pub heatmap_resolution: usize,
    /// Zoom is drawn from `[1 - scale_jitter, 1 + scale_jitter]`.
    pub scale_jitter: f64,
    pub rotation_deg: f64,
}

impl PreprocessConfig {
    pub fn new(input_size: usize, heatmap_resolution: usize) -> Self {
        Self {
            input_size,
            heatmap_resolution,
            scale_jitter: 0.15,
            rotation_deg: 15.0,
        }
    }

    pub fn heatmap_scale(&self) -> f64 {
        self.heatmap_resolution as f64 / self.input_size as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedSample {
    /// Normalized CHW image, `3 x S x S`.
    pub image: Vec<f32>,
    pub input_size: usize,
    pub heatmap_resolution: usize,
    pub keypoints_hm: Vec<[f64; 2]>,
    pub visibility: Vec<Visibility>,
    /// Original pixels to input pixels.
    pub transform: Affine2,
}

impl ProcessedSample {
    pub fn num_keypoints(&self) -> usize {
        self.keypoints_hm.len()
    }

    pub fn labeled(&self) -> Vec<bool> {
        self.visibility.iter().map(|v| v.is_labeled()).collect()
    }

    /// Maps a heatmap-space point back to original image pixels.
    pub fn heatmap_to_pixels(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.input_size as f64 / self.heatmap_resolution as f64;
        self.transform
            .inverse()
            .expect("preprocess transforms are invertible")
            .apply(x * s, y * s)
    }

    pub fn pixels_to_heatmap(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.heatmap_resolution as f64 / self.input_size as f64;
        let (u, v) = self.transform.apply(x, y);
        (u * s, v * s)
    }
}

/// Crop transform for a box, with zoom `scale` and rotation `angle_deg`
/// about the box center. The longer box side spans the full input.
pub fn crop_transform(instance: &InstanceAnnotation, input_size: usize, scale: f64, angle_deg: f64) -> Result<Affine2> {
    let bbox = instance.bbox;
    if bbox.is_degenerate() {
        return Err(Error::Preprocess(format!(
            "annotation id={} has a degenerate bounding box {:?}",
            instance.id, bbox
        )));
    }
    let (cx, cy) = bbox.center();
    let s = input_size as f64 / bbox.longest_side() * scale;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let half = input_size as f64 / 2.0;
    // p' = s R (p - c) + S/2
    let a = [[s * cos, -s * sin], [s * sin, s * cos]];
    Ok(Affine2 {
        m: [
            [a[0][0], a[0][1], half - (a[0][0] * cx + a[0][1] * cy)],
            [a[1][0], a[1][1], half - (a[1][0] * cx + a[1][1] * cy)],
        ],
    })
}

pub fn preprocess(
    instance: &InstanceAnnotation,
    image: &RgbImage,
    config: &PreprocessConfig,
    augment: bool,
    seed: u64,
) -> Result<ProcessedSample> {
    let (scale, angle) = if augment {
        let mut rng = rng_for(seed, &[instance.id]);
        let scale = 1.0 + rng.random_range(-config.scale_jitter..=config.scale_jitter);
        let angle = rng.random_range(-config.rotation_deg..=config.rotation_deg);
        (scale, angle)
    } else {
        (1.0, 0.0)
    };
    let transform = crop_transform(instance, config.input_size, scale, angle)?;
    let inverse = transform
        .inverse()
        .ok_or_else(|| Error::Preprocess(format!("annotation id={}: singular transform", instance.id)))?;

    let size = config.input_size;
    let image_data = warp_normalized(image, &inverse, size);

    let hm = config.heatmap_scale();
    let extent = size as f64;
    let mut keypoints_hm = Vec::with_capacity(instance.keypoints.len());
    let mut visibility = Vec::with_capacity(instance.keypoints.len());
    for kp in &instance.keypoints {
        let (u, v) = transform.apply(kp.x, kp.y);
        keypoints_hm.push([u * hm, v * hm]);
        let inside = (0.0..extent).contains(&u) && (0.0..extent).contains(&v);
        visibility.push(if inside { kp.v } else { Visibility::Unlabeled });
    }
    Ok(ProcessedSample {
        image: image_data,
        input_size: size,
        heatmap_resolution: config.heatmap_resolution,
        keypoints_hm,
        visibility,
        transform,
    })
}

/// Bilinear resampling of `image` through `inverse` (output -> source),
/// normalized per channel. Samples outside the source read the mean color.
fn warp_normalized(image: &RgbImage, inverse: &Affine2, size: usize) -> Vec<f32> {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    let mean = PIXEL_MEAN.map(|m| m * 255.0);
    let fetch = |x: i64, y: i64| -> [f32; 3] {
        if x < 0 || y < 0 || x >= w || y >= h {
            mean
        } else {
            let p = image.get_pixel(x as u32, y as u32).0;
            [p[0] as f32, p[1] as f32, p[2] as f32]
        }
    };
    for v in 0..size {
        for u in 0..size {
            let (sx, sy) = inverse.apply(u as f64 + 0.5, v as f64 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (tx, ty) = ((fx - x0) as f32, (fy - y0) as f32);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let p00 = fetch(x0, y0);
            let p10 = fetch(x0 + 1, y0);
            let p01 = fetch(x0, y0 + 1);
            let p11 = fetch(x0 + 1, y0 + 1);
            for c in 0..3 {
                let top = p00[c] + (p10[c] - p00[c]) * tx;
                let bottom = p01[c] + (p11[c] - p01[c]) * tx;
                let value = (top + (bottom - top) * ty) / 255.0;
                out[c * plane + v * size + u] = (value - PIXEL_MEAN[c]) / PIXEL_STD[c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::annotation::{BBox, ImageRef, Keypoint};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn instance(bbox: BBox, kps: &[(f64, f64)], size: u32) -> (InstanceAnnotation, RgbImage) {
        let img = RgbImage::from_fn(size, size, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, 77]));
        let inst = InstanceAnnotation {
            id: 3,
            image: ImageRef::Memory(Arc::new(img.clone())),
            image_size: (size, size),
            category_id: 1,
            bbox,
            keypoints: kps.iter().map(|&(x, y)| Keypoint::new(x, y, Visibility::Visible)).collect(),
        };
        (inst, img)
    }

    #[test]
    fn full_image_box_is_identity() {
        let (inst, img) = instance(BBox::full_image(32, 32), &[(3.0, 7.5), (20.25, 30.0)], 32);
        let cfg = PreprocessConfig::new(32, 8);
        let s = preprocess(&inst, &img, &cfg, false, 0).unwrap();
        for (a, b) in s.transform.m.iter().flatten().zip(Affine2::IDENTITY.m.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.keypoints_hm[0], [3.0 / 4.0, 7.5 / 4.0]);
        // pixels are copied through unchanged
        let p = img.get_pixel(5, 9).0;
        let got = s.image[9 * 32 + 5] * PIXEL_STD[0] + PIXEL_MEAN[0];
        assert!((got - p[0] as f32 / 255.0).abs() < 1e-5);
    }

    #[test]
    fn box_center_is_rotation_fixed_point() {
        let bbox = BBox::new(10.0, 12.0, 30.0, 20.0);
        let (inst, img) = instance(bbox, &[bbox.center()], 64);
        let cfg = PreprocessConfig::new(64, 16);
        for seed in 0..20 {
            let s = preprocess(&inst, &img, &cfg, true, seed).unwrap();
            let [x, y] = s.keypoints_hm[0];
            assert!((x - 8.0).abs() < 1e-9 && (y - 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_box_fails() {
        let (inst, img) = instance(BBox::new(1.0, 1.0, 0.0, 5.0), &[(1.0, 1.0)], 16);
        assert!(matches!(
            preprocess(&inst, &img, &PreprocessConfig::new(16, 4), false, 0),
            Err(Error::Preprocess(_))
        ));
    }

    #[test]
    fn points_leaving_the_crop_are_demoted() {
        let (inst, img) = instance(BBox::new(8.0, 8.0, 16.0, 16.0), &[(2.0, 2.0), (16.0, 16.0)], 32);
        let s = preprocess(&inst, &img, &PreprocessConfig::new(16, 4), false, 0).unwrap();
        assert_eq!(s.visibility, vec![Visibility::Unlabeled, Visibility::Visible]);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let a = Affine2 { m: [[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]] };
        let b = Affine2 { m: [[0.3, 0.0, -1.0], [0.2, 1.1, 4.0]] };
        let ab = a.compose(&b);
        let (x, y) = b.apply(1.5, -2.0);
        let direct = a.apply(x, y);
        let composed = ab.apply(1.5, -2.0);
        assert!((direct.0 - composed.0).abs() < 1e-12 && (direct.1 - composed.1).abs() < 1e-12);
        let id = ab.compose(&ab.inverse().unwrap());
        assert!((id.apply(3.0, 4.0).0 - 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn inverse_map_recovers_keypoints(
            x in 0.0f64..100.0, y in 0.0f64..80.0,
            bx in 0.0f64..40.0, by in 0.0f64..30.0, bw in 5.0f64..60.0, bh in 5.0f64..50.0,
            seed in any::<u64>(),
        ) {
            let (inst, img) = instance(BBox::new(bx, by, bw, bh), &[(x, y)], 100);
            let cfg = PreprocessConfig::new(64, 16);
            let s = preprocess(&inst, &img, &cfg, true, seed).unwrap();
            let [hx, hy] = s.keypoints_hm[0];
            let (px, py) = s.heatmap_to_pixels(hx, hy);
            prop_assert!((px - x).abs() < 1e-4 && (py - y).abs() < 1e-4);
            if s.visibility[0].is_labeled() {
                prop_assert!(hx >= 0.0 && hx < 16.0 && hy >= 0.0 && hy < 16.0);
            }
        }

        #[test]
        fn augmentation_is_seeded(seed in any::<u64>()) {
            let (inst, img) = instance(BBox::new(4.0, 4.0, 20.0, 24.0), &[(10.0, 12.0)], 32);
            let cfg = PreprocessConfig::new(16, 4);
            let a = preprocess(&inst, &img, &cfg, true, seed).unwrap();
            let b = preprocess(&inst, &img, &cfg, true, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
