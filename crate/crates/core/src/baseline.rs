//! Prototype-matching baseline: each support keypoint becomes a prototype
//! (heatmap-weighted mean of mid-level features, averaged over supports) and
//! a query keypoint is placed at the feature cell nearest to its prototype.
//!
//! The feature extractor is trained episodically with a cross-entropy over
//! the query similarity map against the cell holding the ground truth.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::ProcessedSample;
use crate::error::{Error, Result};
use crate::eval::KeypointPredictor;
use crate::heatmap::{encode, pooling_weights, resample_bilinear, HeatmapStack, Peak};
use crate::model::{support_pooling_rows, Backbone, ModelConfig, ModelKind, ParamStore, PreparedEpisode};
use crate::train::{BatchLoss, EpisodicModel};

/// Upsampling factor applied to similarity maps before the argmax.
pub const MATCH_UPSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Negative Euclidean distance.
    #[default]
    NegL2,
    Cosine,
}

impl Similarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Similarity::NegL2 => "neg_l2",
            Similarity::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "neg_l2" | "l2" => Ok(Similarity::NegL2),
            "cosine" => Ok(Similarity::Cosine),
            other => Err(Error::Config(format!("unknown similarity {other:?} (neg_l2, cosine)"))),
        }
    }

    fn score(self, a: &[f64], b: &[f32]) -> f64 {
        match self {
            Similarity::NegL2 => -a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x - y as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
            Similarity::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb)
                }
            }
        }
    }
}

/// One image's features, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl FeatureGrid {
    pub fn cell(&self, y: usize, x: usize) -> Vec<f32> {
        let plane = self.height * self.width;
        (0..self.channels).map(|c| self.values[c * plane + y * self.width + x]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `J` prototypes of `C` values; invalid ones are zero.
    pub prototypes: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

/// Masked mean over supports of heatmap-pooled features. A keypoint is valid
/// when at least one support labels it with heatmap mass on the grid.
pub fn build_prototypes(features: &[FeatureGrid], heatmaps: &[HeatmapStack], labeled: &[Vec<bool>]) -> Result<PrototypeSet> {
    let first = features
        .first()
        .ok_or_else(|| Error::Contract("prototypes need at least one support".into()))?;
    if heatmaps.len() != features.len() || labeled.len() != features.len() {
        return Err(Error::Shape("one heatmap stack and flag row per support".into()));
    }
    let j = heatmaps[0].channels;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut sums = vec![vec![0.0f64; c]; j];
    let mut counts = vec![0usize; j];
    for ((f, stack), flags) in features.iter().zip(heatmaps).zip(labeled) {
        if (f.channels, f.height, f.width) != (c, h, w) || stack.channels != j || flags.len() != j {
            return Err(Error::Shape("supports disagree on feature or keypoint layout".into()));
        }
        for k in 0..j {
            if !flags[k] {
                continue;
            }
            let Some(weights) = pooling_weights(stack.channel(k), (stack.height, stack.width), (h, w)) else {
                continue;
            };
            counts[k] += 1;
            for ch in 0..c {
                let plane = &f.values[ch * h * w..(ch + 1) * h * w];
                sums[k][ch] += weights.iter().zip(plane).map(|(&a, &b)| a * b as f64).sum::<f64>();
            }
        }
    }
    let valid: Vec<bool> = counts.iter().map(|&n| n > 0).collect();
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| if n > 0 { s.into_iter().map(|v| v / n as f64).collect() } else { vec![0.0; c] })
        .collect();
    Ok(PrototypeSet { prototypes, valid })
}

/// Similarity of a prototype to every query cell, row-major.
pub fn similarity_map(prototype: &[f64], query: &FeatureGrid, similarity: Similarity) -> Vec<f64> {
    let mut out = Vec::with_capacity(query.height * query.width);
    for y in 0..query.height {
        for x in 0..query.width {
            out.push(similarity.score(prototype, &query.cell(y, x)));
        }
    }
    out
}

/// Per keypoint: similarity map, bilinear upsampling by [`MATCH_UPSAMPLE`],
/// argmax, mapped to heatmap coordinates of a `heatmap_resolution` grid.
/// Confidence is the softmax of the similarities at the best cell.
pub fn match_prototypes(
    prototypes: &PrototypeSet,
    query: &FeatureGrid,
    heatmap_resolution: usize,
    similarity: Similarity,
) -> Result<Vec<Option<Peak>>> {
    if prototypes.prototypes.iter().any(|p| p.len() != query.channels) {
        return Err(Error::Shape("prototype and query channel counts differ".into()));
    }
    let (h, w) = (query.height, query.width);
    let (uh, uw) = (h * MATCH_UPSAMPLE, w * MATCH_UPSAMPLE);
    let scale = |n: usize, up: usize| {
        if up > 1 {
            (heatmap_resolution - 1) as f64 / (up - 1) as f64
        } else {
            let _ = n;
            0.0
        }
    };
    let (sy, sx) = (scale(h, uh), scale(w, uw));
    Ok(prototypes
        .prototypes
        .iter()
        .zip(&prototypes.valid)
        .map(|(proto, &ok)| {
            if !ok {
                return None;
            }
            let map = similarity_map(proto, query, similarity);
            let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = map.iter().map(|v| (v - max).exp()).sum();
            let as_f32: Vec<f32> = map.iter().map(|&v| v as f32).collect();
            let up = resample_bilinear(&as_f32, 1, (h, w), (uh, uw));
            let mut best = 0;
            for (i, &v) in up.iter().enumerate() {
                if v > up[best] {
                    best = i;
                }
            }
            Some(Peak {
                x: (best % uw) as f64 * sx,
                y: (best / uw) as f64 * sy,
                confidence: 1.0 / z,
            })
        })
        .collect())
}

/// Baseline network: a single stage-truncated backbone shared by supports
/// and queries.
#[derive(Debug, Clone)]
pub struct ProtoNet {
    config: ModelConfig,
    backbone: Backbone,
    similarity: Similarity,
    dtype: DType,
}

impl ProtoNet {
    pub fn new(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, "backbone", &config.backbone, config.prototype_stage)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            similarity: Similarity::NegL2,
            dtype: store.dtype(),
        })
    }

    pub fn with_similarity(mut self, similarity: Similarity) -> Self {
        self.similarity = similarity;
        self
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Side of the feature grid the prototypes live on.
    pub fn grid_size(&self) -> usize {
        self.config.input_size / self.config.backbone.stage_stride(self.config.prototype_stage)
    }

    fn images(&self, samples: &[&ProcessedSample]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut pixels = Vec::with_capacity(samples.len() * 3 * s * s);
        for sample in samples {
            if sample.input_size != s || sample.heatmap_resolution != self.config.heatmap_resolution {
                return Err(Error::Shape(format!(
                    "sample prepared at {}px, model expects {s}",
                    sample.input_size
                )));
            }
            pixels.extend_from_slice(&sample.image);
        }
        Ok(Tensor::from_vec(pixels, (samples.len(), 3, s, s), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// `(B, C, h, w)` features for a batch of samples.
    pub fn features(&self, samples: &[&ProcessedSample]) -> Result<Tensor> {
        self.backbone.forward(&self.images(samples)?)
    }

    pub fn feature_grids(&self, samples: &[&ProcessedSample]) -> Result<Vec<FeatureGrid>> {
        let f = self.features(samples)?;
        let (b, c, h, w) = f.dims4()?;
        let flat = f.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let n = c * h * w;
        Ok((0..b)
            .map(|i| FeatureGrid {
                channels: c,
                height: h,
                width: w,
                values: flat[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }

    pub fn prototypes(&self, episode: &PreparedEpisode) -> Result<PrototypeSet> {
        let supports: Vec<_> = episode.supports.iter().collect();
        let grids = self.feature_grids(&supports)?;
        let hm = self.config.heatmap_resolution;
        let gaussian = self.config.gaussian();
        let labeled: Vec<Vec<bool>> = supports.iter().map(|s| s.labeled()).collect();
        let stacks: Vec<HeatmapStack> = supports
            .iter()
            .zip(&labeled)
            .map(|(s, l)| encode(&s.keypoints_hm, l, gaussian, (hm, hm)))
            .collect();
        build_prototypes(&grids, &stacks, &labeled)
    }

    pub fn predict(&self, episode: &PreparedEpisode) -> Result<Vec<Option<Peak>>> {
        let protos = self.prototypes(episode)?;
        let query = self.feature_grids(&[&episode.query])?.remove(0);
        match_prototypes(&protos, &query, self.config.heatmap_resolution, self.similarity)
    }

    /// Similarity logits `(B, J, h*w)` of each prototype against its query.
    fn logits(&self, protos: &Tensor, query: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = query.dims4()?;
        let q = query.reshape((b, c, h * w))?;
        match self.similarity {
            Similarity::NegL2 => {
                let cross = protos.matmul(&q)?;
                let pn = protos.sqr()?.sum_keepdim(D::Minus1)?;
                let qn = q.sqr()?.sum_keepdim(1)?;
                let d2 = cross.affine(-2.0, 0.0)?.broadcast_add(&pn)?.broadcast_add(&qn)?;
                Ok((d2.relu()? + 1e-8)?.sqrt()?.neg()?)
            }
            Similarity::Cosine => {
                let pn = (protos.sqr()?.sum_keepdim(D::Minus1)? + 1e-8)?.sqrt()?;
                let qn = (q.sqr()?.sum_keepdim(1)? + 1e-8)?.sqrt()?;
                let cos = protos.broadcast_div(&pn)?.matmul(&q.broadcast_div(&qn)?)?;
                // fixed temperature so the softmax can sharpen
                Ok(cos.affine(10.0, 0.0)?)
            }
        }
    }
}

/// Nearest grid cell to a heatmap-space point under corner-aligned
/// correspondence between the two grids.
fn target_cell(point: [f64; 2], heatmap_resolution: usize, grid: usize) -> usize {
    let scale = if heatmap_resolution > 1 {
        (grid - 1) as f64 / (heatmap_resolution - 1) as f64
    } else {
        0.0
    };
    let idx = |v: f64| ((v * scale).round().max(0.0) as usize).min(grid - 1);
    idx(point[1]) * grid + idx(point[0])
}

impl EpisodicModel for ProtoNet {
    fn kind() -> ModelKind {
        ModelKind::ProtoNet
    }

    fn build(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        ProtoNet::new(config, store)
    }

    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn batch_loss(&self, episodes: &[PreparedEpisode]) -> Result<Option<BatchLoss>> {
        let shots = episodes.first().map_or(0, PreparedEpisode::shots);
        if shots == 0 || episodes.iter().any(|e| e.shots() != shots) {
            return Err(Error::Contract("episodes in a batch need a common, positive shot count".into()));
        }
        let b = episodes.len();
        let jmax = episodes.iter().map(PreparedEpisode::num_keypoints).max().unwrap_or(0);
        let grid = self.grid_size();
        let cells = grid * grid;
        let hm = self.config.heatmap_resolution;
        let gaussian = self.config.gaussian();

        let supports: Vec<&ProcessedSample> = episodes.iter().flat_map(|e| e.supports.iter()).collect();
        let queries: Vec<&ProcessedSample> = episodes.iter().map(|e| &e.query).collect();

        // per (episode, support) pooling rows, then per-keypoint support weights
        let mut rows = Vec::with_capacity(b * shots * jmax * cells);
        let mut counts = vec![0usize; b * jmax];
        let mut valid = Vec::with_capacity(b * shots);
        for (i, s) in supports.iter().enumerate() {
            let labeled = s.labeled();
            let maps = encode(&s.keypoints_hm, &labeled, gaussian, (hm, hm));
            let (r, v) = support_pooling_rows(&maps, &labeled, jmax, (grid, grid));
            for (j, &ok) in v.iter().enumerate() {
                if ok {
                    counts[(i / shots) * jmax + j] += 1;
                }
            }
            rows.extend(r);
            valid.push(v);
        }
        let mut mean_weights = vec![0f64; b * shots * jmax];
        for (i, v) in valid.iter().enumerate() {
            for (j, &ok) in v.iter().enumerate() {
                if ok {
                    mean_weights[i * jmax + j] = 1.0 / counts[(i / shots) * jmax + j] as f64;
                }
            }
        }

        // supervision: labeled query keypoints that have a prototype
        let mut targets = vec![0u32; b * jmax];
        let mut loss_weights = vec![0f64; b * jmax];
        let mut per_episode = vec![0usize; b];
        for (e, q) in queries.iter().enumerate() {
            let labeled = q.labeled();
            for j in 0..q.num_keypoints() {
                if labeled[j] && counts[e * jmax + j] > 0 {
                    per_episode[e] += 1;
                    targets[e * jmax + j] = target_cell(q.keypoints_hm[j], hm, grid) as u32;
                }
            }
        }
        let contributing = per_episode.iter().filter(|&&n| n > 0).count();
        if contributing == 0 {
            return Ok(None);
        }
        for (e, q) in queries.iter().enumerate() {
            let labeled = q.labeled();
            for j in 0..q.num_keypoints() {
                if labeled[j] && counts[e * jmax + j] > 0 {
                    loss_weights[e * jmax + j] = 1.0 / (per_episode[e] * contributing) as f64;
                }
            }
        }

        let dev = Device::Cpu;
        let dt = self.dtype;
        let feats = self.features(&supports)?;
        let (_, c, _, _) = feats.dims4()?;
        let flat = feats.reshape((b * shots, c, cells))?.transpose(1, 2)?.contiguous()?;
        let rows = Tensor::from_vec(rows, (b * shots, jmax, cells), &dev)?.to_dtype(dt)?;
        let pooled = rows.matmul(&flat)?; // (B*K, J, C)
        let mean_weights = Tensor::from_vec(mean_weights, (b, shots, jmax, 1), &dev)?.to_dtype(dt)?;
        let protos = pooled.reshape((b, shots, jmax, c))?.broadcast_mul(&mean_weights)?.sum(1)?;

        let query = self.features(&queries)?;
        let logits = self.logits(&protos, &query)?; // (B, J, cells)
        let max = logits.max_keepdim(D::Minus1)?.detach();
        let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + &max)?;
        let targets = Tensor::from_vec(targets, (b, jmax, 1), &dev)?;
        let picked = logits.gather(&targets, D::Minus1)?;
        let ce = (lse - picked)?.squeeze(D::Minus1)?;
        let weights = Tensor::from_vec(loss_weights, (b, jmax), &dev)?.to_dtype(dt)?;
        let loss = (ce * weights)?.sum_all()?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        Ok(Some(BatchLoss {
            loss,
            value,
            supervised: per_episode.iter().sum(),
            episodes: contributing,
        }))
    }
}

impl KeypointPredictor for ProtoNet {
    fn name(&self) -> &str {
        match self.similarity {
            Similarity::NegL2 => "protonet[similarity=neg_l2,objective=episodic_cross_entropy]",
            Similarity::Cosine => "protonet[similarity=cosine,objective=episodic_cross_entropy]",
        }
    }

    fn preprocess_config(&self) -> crate::data::PreprocessConfig {
        self.config.preprocess()
    }

    fn predict_keypoints(&self, episode: &PreparedEpisode) -> Result<Vec<Option<Peak>>> {
        self.predict(episode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureGrid {
        FeatureGrid {
            channels: c,
            height: h,
            width: w,
            values: (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        }
    }

    fn one_hot(h: usize, w: usize, y: usize, x: usize) -> HeatmapStack {
        let mut s = HeatmapStack::zeros(1, h, w);
        s.channel_mut(0)[y * w + x] = 1.0;
        s
    }

    #[test]
    fn one_hot_heatmap_selects_the_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_grid(&mut rng, 5, 6, 6);
        let p = build_prototypes(&[f.clone()], &[one_hot(6, 6, 2, 4)], &[vec![true]]).unwrap();
        let expect: Vec<f64> = f.cell(2, 4).iter().map(|&v| v as f64).collect();
        for (a, b) in p.prototypes[0].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_supports_give_the_single_support_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_grid(&mut rng, 4, 8, 8);
        let hm = encode(&[[3.3, 5.1], [10.0, 2.0]], &[true, true], crate::heatmap::GaussianSpec::new(1.5), (16, 16));
        let one = build_prototypes(&[f.clone()], &[hm.clone()], &[vec![true, true]]).unwrap();
        let three = build_prototypes(&vec![f; 3], &vec![hm; 3], &vec![vec![true, true]; 3]).unwrap();
        for (a, b) in one.prototypes.iter().flatten().zip(three.prototypes.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_mean_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = crate::heatmap::GaussianSpec::new(1.5);
        let feats: Vec<_> = (0..3).map(|_| random_grid(&mut rng, 3, 4, 4)).collect();
        let labeled = vec![vec![true, false], vec![true, true], vec![false, true]];
        let stacks: Vec<_> = labeled
            .iter()
            .map(|l| {
                let pts = [[rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)], [rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)]];
                encode(&pts, l, spec, (16, 16))
            })
            .collect();
        let got = build_prototypes(&feats, &stacks, &labeled).unwrap();
        for j in 0..2 {
            let mut sum = vec![0.0; 3];
            let mut n = 0.0;
            for k in 0..3 {
                if !labeled[k][j] {
                    continue;
                }
                let wts = pooling_weights(stacks[k].channel(j), (16, 16), (4, 4)).unwrap();
                for c in 0..3 {
                    for y in 0..4 {
                        for x in 0..4 {
                            sum[c] += wts[y * 4 + x] * feats[k].values[c * 16 + y * 4 + x] as f64;
                        }
                    }
                }
                n += 1.0;
            }
            for c in 0..3 {
                assert!((got.prototypes[j][c] - sum[c] / n).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn self_match_recovers_the_support_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_grid(&mut rng, 16, 8, 8);
        let p = build_prototypes(&[f.clone()], &[one_hot(8, 8, 5, 2)], &[vec![true]]).unwrap();
        let peak = match_prototypes(&p, &f, 8, Similarity::NegL2).unwrap()[0].unwrap();
        // grid and heatmap coincide here, so the peak lands on cell (2, 5)
        assert!((peak.x - 2.0).abs() < 0.3 && (peak.y - 5.0).abs() < 0.3, "{peak:?}");
    }

    #[test]
    fn argmax_matches_nearest_cell_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let q = random_grid(&mut rng, 6, 5, 7);
            let proto: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let map = similarity_map(&proto, &q, Similarity::NegL2);
            let best = (0..map.len()).max_by(|&a, &b| map[a].partial_cmp(&map[b]).unwrap()).unwrap();
            let mut oracle = (0, f64::INFINITY);
            for y in 0..5 {
                for x in 0..7 {
                    let d: f64 = (0..6).map(|c| (proto[c] - q.values[c * 35 + y * 7 + x] as f64).powi(2)).sum();
                    if d < oracle.1 {
                        oracle = (y * 7 + x, d);
                    }
                }
            }
            assert_eq!(best, oracle.0);
        }
    }

    #[test]
    fn shifting_everything_leaves_the_match_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_grid(&mut rng, 4, 6, 6);
        let protos = PrototypeSet {
            prototypes: (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            valid: vec![true, true, false],
        };
        let shift = [0.5f32, -2.0, 3.0, 0.25];
        let mut q2 = q.clone();
        for c in 0..4 {
            q2.values[c * 36..(c + 1) * 36].iter_mut().for_each(|v| *v += shift[c]);
        }
        let p2 = PrototypeSet {
            prototypes: protos.prototypes.iter().map(|p| p.iter().zip(shift).map(|(a, s)| a + s as f64).collect()).collect(),
            valid: protos.valid.clone(),
        };
        let a = match_prototypes(&protos, &q, 24, Similarity::NegL2).unwrap();
        let b = match_prototypes(&p2, &q2, 24, Similarity::NegL2).unwrap();
        assert!(a[2].is_none());
        for (x, y) in a.iter().zip(&b).take(2) {
            let (x, y) = (x.unwrap(), y.unwrap());
            assert_eq!((x.x, x.y), (y.x, y.y));
        }
    }

    #[test]
    fn support_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = crate::heatmap::GaussianSpec::new(1.5);
        let feats: Vec<_> = (0..3).map(|_| random_grid(&mut rng, 3, 4, 4)).collect();
        let stacks: Vec<_> = (0..3).map(|i| encode(&[[i as f64 * 4.0 + 1.0, 7.0]], &[true], spec, (16, 16))).collect();
        let flags = vec![vec![true]; 3];
        let a = build_prototypes(&feats, &stacks, &flags).unwrap();
        let order = [2, 0, 1];
        let fb: Vec<_> = order.iter().map(|&i| feats[i].clone()).collect();
        let sb: Vec<_> = order.iter().map(|&i| stacks[i].clone()).collect();
        let b = build_prototypes(&fb, &sb, &flags).unwrap();
        for (x, y) in a.prototypes[0].iter().zip(&b.prototypes[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
