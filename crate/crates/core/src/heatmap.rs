//! Gaussian target heatmaps, peak decoding and corner-aligned bilinear
//! resampling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    /// Standard deviation in heatmap cells.
    pub sigma: f64,
}

impl GaussianSpec {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma > 0.0, "gaussian sigma must be positive");
        Self { sigma }
    }
}

/// `J x H x W` per-keypoint grids, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl HeatmapStack {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn from_values(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), channels * height * width, "heatmap value count");
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        &self.values[j * self.plane()..(j + 1) * self.plane()]
    }

    pub fn channel_mut(&mut self, j: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.values[j * p..(j + 1) * p]
    }

    pub fn at(&self, j: usize, y: usize, x: usize) -> f32 {
        self.values[j * self.plane() + y * self.width + x]
    }
}

/// Unnormalized Gaussians (peak 1) at each labeled keypoint; unlabeled
/// keypoints get an all-zero channel.
pub fn encode(
    keypoints_hm: &[[f64; 2]],
    labeled: &[bool],
    spec: GaussianSpec,
    (height, width): (usize, usize),
) -> HeatmapStack {
    assert_eq!(keypoints_hm.len(), labeled.len(), "keypoints and flags differ in length");
    let mut stack = HeatmapStack::zeros(keypoints_hm.len(), height, width);
    let denom = 2.0 * spec.sigma * spec.sigma;
    for (j, (&[x, y], &on)) in keypoints_hm.iter().zip(labeled).enumerate() {
        if !on {
            continue;
        }
        let ch = stack.channel_mut(j);
        for v in 0..height {
            let dy = v as f64 - y;
            for u in 0..width {
                let dx = u as f64 - x;
                ch[v * width + u] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    stack
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Argmax per channel, shifted a quarter cell toward the larger neighbour on
/// each axis. Cells outside the grid count as zero.
pub fn decode(stack: &HeatmapStack) -> Vec<Peak> {
    (0..stack.channels).map(|j| decode_channel(stack.channel(j), stack.height, stack.width)).collect()
}

pub fn decode_channel(ch: &[f32], height: usize, width: usize) -> Peak {
    let mut best = 0usize;
    for (i, &v) in ch.iter().enumerate() {
        if v > ch[best] {
            best = i;
        }
    }
    let (py, px) = (best / width, best % width);
    let mut x = px as f64;
    let mut y = py as f64;
    // a neighbour outside the grid reads as zero
    let at = |i: Option<usize>| i.map_or(0.0, |i| ch[i]);
    let left = (px > 0).then(|| best - 1);
    let right = (px + 1 < width).then_some(best + 1);
    x += 0.25 * sign(at(right) - at(left));
    let up = (py > 0).then(|| best - width);
    let down = (py + 1 < height).then_some(best + width);
    y += 0.25 * sign(at(down) - at(up));
    Peak {
        x,
        y,
        confidence: ch[best].max(0.0) as f64,
    }
}

fn sign(d: f32) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Source taps `(i0, i1, t)` for each destination index under corner-aligned
/// sampling: `src = dst * (n_src - 1) / (n_dst - 1)`.
pub fn interpolation_taps(n_src: usize, n_dst: usize) -> Vec<(usize, usize, f64)> {
    (0..n_dst)
        .map(|d| {
            let pos = if n_dst > 1 {
                d as f64 * (n_src - 1) as f64 / (n_dst - 1) as f64
            } else {
                0.0
            };
            let i0 = (pos.floor() as usize).min(n_src - 1);
            let i1 = (i0 + 1).min(n_src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Dense `n_dst x n_src` matrix of the same interpolation.
pub fn interpolation_matrix(n_src: usize, n_dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_dst * n_src];
    for (d, (i0, i1, t)) in interpolation_taps(n_src, n_dst).into_iter().enumerate() {
        m[d * n_src + i0] += 1.0 - t;
        m[d * n_src + i1] += t;
    }
    m
}

/// Bilinear resampling of a `C x h x w` map to `C x H x W`.
pub fn resample_bilinear(
    data: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f32> {
    assert_eq!(data.len(), channels * h * w, "feature map size");
    let ty = interpolation_taps(h, out_h);
    let tx = interpolation_taps(w, out_w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let src = &data[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let a = src[y0 * w + x0] as f64;
                let b = src[y0 * w + x1] as f64;
                let cc = src[y1 * w + x0] as f64;
                let d = src[y1 * w + x1] as f64;
                let top = a + (b - a) * fx;
                let bottom = cc + (d - cc) * fx;
                out.push((top + (bottom - top) * fy) as f32);
            }
        }
    }
    out
}

/// Weights over the `h x w` feature cells equivalent to upsampling features
/// to the heatmap grid and taking the heatmap-weighted mean there:
/// `f = sum_p U(p) H(p) / sum_p H(p) = sum_cell F(cell) weight(cell)`.
/// Returns `None` when the heatmap carries no mass.
pub fn pooling_weights(heatmap: &[f32], (hm_h, hm_w): (usize, usize), (h, w): (usize, usize)) -> Option<Vec<f64>> {
    assert_eq!(heatmap.len(), hm_h * hm_w, "heatmap size");
    let mass: f64 = heatmap.iter().map(|&v| v as f64).sum();
    if mass <= 0.0 || !mass.is_finite() {
        return None;
    }
    let ty = interpolation_taps(h, hm_h);
    let tx = interpolation_taps(w, hm_w);
    let mut weights = vec![0.0; h * w];
    for (v, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (u, &(x0, x1, fx)) in tx.iter().enumerate() {
            let m = heatmap[v * hm_w + u] as f64 / mass;
            if m == 0.0 {
                continue;
            }
            weights[y0 * w + x0] += m * (1.0 - fy) * (1.0 - fx);
            weights[y0 * w + x1] += m * (1.0 - fy) * fx;
            weights[y1 * w + x0] += m * fy * (1.0 - fx);
            weights[y1 * w + x1] += m * fy * fx;
        }
    }
    Some(weights)
}
