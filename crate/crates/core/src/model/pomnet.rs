use candle_core::{DType, Device, Tensor, D};

use super::backbone::Backbone;
use super::batch::{support_pooling_rows, EpisodeBatch, PreparedEpisode};
use super::config::ModelConfig;
use super::head::MatchingHead;
use super::kim::{position_tensor, KimBlock};
use super::layers::Linear;
use super::params::{Init, ParamStore};
use crate::error::{Error, Result};
use crate::heatmap::HeatmapStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Support,
    Query,
}

/// Backbone output, `(B, C, h, w)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

/// `(B, L, D)` slot embeddings. `mask[b][l]` marks valid keypoint slots;
/// slots at or beyond `num_keypoints[b]` are padding.
#[derive(Debug, Clone)]
pub struct KeypointFeatureSet {
    pub embeddings: Tensor,
    pub mask: Vec<Vec<bool>>,
    pub num_keypoints: Vec<usize>,
}

impl KeypointFeatureSet {
    pub fn batch(&self) -> usize {
        self.mask.len()
    }

    pub fn mask_tensor(&self) -> Result<Tensor> {
        let slots = self.mask.first().map_or(0, Vec::len);
        let flat: Vec<u8> = self.mask.iter().flatten().map(|&v| v as u8).collect();
        Ok(Tensor::from_vec(flat, (self.batch(), slots), self.embeddings.device())?)
    }
}

/// Heatmaps for one query; `predicted[j]` is false where no support had
/// keypoint `j` labeled, and that channel is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedHeatmaps {
    pub stack: HeatmapStack,
    pub predicted: Vec<bool>,
}

/// Raw network output for a batch: one heatmap per predicted slot.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(N, H, W)`.
    pub heatmaps: Tensor,
    /// `(episode, keypoint)` for each row of `heatmaps`.
    pub slots: Vec<(usize, usize)>,
    pub num_keypoints: Vec<usize>,
}

impl ForwardOutput {
    pub fn to_stacks(&self) -> Result<Vec<PredictedHeatmaps>> {
        let (_, h, w) = self.heatmaps.dims3()?;
        let flat = self.heatmaps.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut out: Vec<PredictedHeatmaps> = self
            .num_keypoints
            .iter()
            .map(|&j| PredictedHeatmaps {
                stack: HeatmapStack::zeros(j, h, w),
                predicted: vec![false; j],
            })
            .collect();
        for (row, &(b, j)) in self.slots.iter().enumerate() {
            out[b].stack.channel_mut(j).copy_from_slice(&flat[row * h * w..(row + 1) * h * w]);
            out[b].predicted[j] = true;
        }
        Ok(out)
    }
}

/// Heatmap-weighted mean of features: `(B, C, h, w)` x `(B, L, h*w)` -> `(B, L, C)`.
pub fn pool_weighted_mean(features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    let flat = features.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
    Ok(weights.matmul(&flat)?)
}

#[derive(Debug, Clone)]
pub struct PomNet {
    config: ModelConfig,
    support_backbone: Backbone,
    query_backbone: Backbone,
    keypoint_proj: Linear,
    query_proj: Linear,
    placeholder: Tensor,
    blocks: Vec<KimBlock>,
    head: MatchingHead,
    position: Tensor,
    dtype: DType,
}

impl PomNet {
    /// Builds the network, creating missing parameters in `store`.
    pub fn new(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let stages = config.backbone.num_stages();
        let c = config.feature_channels();
        let d = config.embed_dim;
        let support_backbone = Backbone::new(store, "support_backbone", &config.backbone, stages)?;
        let query_backbone = Backbone::new(store, "query_backbone", &config.backbone, stages)?;
        let keypoint_proj = Linear::new(store, "keypoint_proj", c, d)?;
        let query_proj = Linear::new(store, "query_proj", c, d)?;
        let placeholder = store.param("placeholder", &[d], Init::Normal(1.0))?;
        let blocks = (0..config.kim_blocks)
            .map(|i| KimBlock::new(store, &format!("kim.{i}"), d, config.attention_heads, config.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let head = MatchingHead::new(
            store,
            "head",
            d,
            c,
            config.decoder_channels,
            config.decoder_deconv_count,
            config.norm_groups,
        )?;
        let f = config.feature_size();
        let position = position_tensor(f, f, d, store.dtype(), store.device())?;
        Ok(Self {
            config: config.clone(),
            support_backbone,
            query_backbone,
            keypoint_proj,
            query_proj,
            placeholder,
            blocks,
            head,
            position,
            dtype: store.dtype(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn extract_features(&self, images: &Tensor, branch: Branch) -> Result<FeatureMap> {
        let s = self.config.input_size;
        match images.dims() {
            [_, 3, h, w] if *h == s && *w == s => {}
            other => {
                return Err(Error::Shape(format!("expected (B, 3, {s}, {s}) images, got {other:?}")));
            }
        }
        let backbone = match branch {
            Branch::Support => &self.support_backbone,
            Branch::Query => &self.query_backbone,
        };
        Ok(FeatureMap {
            values: backbone.forward(images)?,
            stride: self.config.backbone.stride(),
        })
    }

    /// Projects pooled `(B, L, C)` features to `D` and puts the placeholder
    /// in every slot not flagged valid.
    pub fn embed_keypoints(&self, pooled: &Tensor, valid: &[Vec<bool>], num_keypoints: Vec<usize>) -> Result<KeypointFeatureSet> {
        let projected = self.keypoint_proj.forward(pooled)?;
        let set = KeypointFeatureSet {
            embeddings: projected,
            mask: valid.to_vec(),
            num_keypoints,
        };
        self.fill_placeholders(set)
    }

    fn fill_placeholders(&self, set: KeypointFeatureSet) -> Result<KeypointFeatureSet> {
        let shape = set.embeddings.dims().to_vec();
        let mask = set.mask_tensor()?.unsqueeze(2)?.broadcast_as(shape.as_slice())?;
        let fill = self.placeholder.broadcast_as(shape.as_slice())?;
        Ok(KeypointFeatureSet {
            embeddings: mask.where_cond(&set.embeddings, &fill)?,
            ..set
        })
    }

    /// Support keypoint features from feature maps and ground-truth heatmaps
    /// (one stack per batch row). Labeled keypoints whose heatmap carries no
    /// mass become invalid slots.
    pub fn pool_keypoint_features(
        &self,
        features: &FeatureMap,
        heatmaps: &[HeatmapStack],
        labeled: &[Vec<bool>],
    ) -> Result<KeypointFeatureSet> {
        let (b, _, h, w) = features.values.dims4()?;
        if heatmaps.len() != b || labeled.len() != b {
            return Err(Error::Shape("one heatmap stack and flag row per feature map".into()));
        }
        let slots = self.config.slot_count;
        let mut rows = Vec::with_capacity(b * slots * h * w);
        let mut valid = Vec::with_capacity(b);
        let mut counts = Vec::with_capacity(b);
        for (stack, flags) in heatmaps.iter().zip(labeled) {
            self.config.check_keypoints(stack.channels)?;
            if stack.height != self.config.heatmap_resolution || stack.width != self.config.heatmap_resolution {
                return Err(Error::Shape(format!(
                    "heatmaps are {}x{}, expected {}",
                    stack.height, stack.width, self.config.heatmap_resolution
                )));
            }
            let (r, v) = support_pooling_rows(stack, flags, slots, (h, w));
            rows.extend(r);
            valid.push(v);
            counts.push(stack.channels);
        }
        let weights = Tensor::from_vec(rows, (b, slots, h * w), &Device::Cpu)?.to_dtype(self.dtype)?;
        let pooled = pool_weighted_mean(&features.values, &weights)?;
        self.embed_keypoints(&pooled, &valid, counts)
    }

    /// Mean over supports of each slot's embedding, counting only supports
    /// where the slot is valid. Computed as `first + mean(x_k - first)` so
    /// identical supports reproduce the single-support embedding exactly.
    pub fn aggregate_kshot(&self, per_support: &[KeypointFeatureSet]) -> Result<KeypointFeatureSet> {
        let first = per_support
            .first()
            .ok_or_else(|| Error::Contract("K-shot aggregation needs at least one support".into()))?;
        let b = first.batch();
        for s in per_support {
            if s.embeddings.dims() != first.embeddings.dims() || s.num_keypoints != first.num_keypoints {
                return Err(Error::Contract("supports disagree on slot layout or category".into()));
            }
        }
        // (B, K, L, D), episode-major
        let stacked = Tensor::stack(&per_support.iter().map(|s| &s.embeddings).collect::<Vec<_>>(), 1)?;
        let mut valid = Vec::with_capacity(b * per_support.len());
        for bi in 0..b {
            for s in per_support {
                valid.push(s.mask[bi].clone());
            }
        }
        self.aggregate_stacked(&stacked, &valid, first.num_keypoints.clone())
    }

    fn aggregate_stacked(&self, stacked: &Tensor, valid: &[Vec<bool>], num_keypoints: Vec<usize>) -> Result<KeypointFeatureSet> {
        let (b, k, l, d) = stacked.dims4()?;
        let mut first_idx = Vec::with_capacity(b * l);
        let mut weight = vec![0f64; b * k * l];
        let mut mask = vec![vec![false; l]; b];
        for bi in 0..b {
            for li in 0..l {
                let mut first = None;
                let mut count = 0usize;
                for ki in 0..k {
                    if valid[bi * k + ki][li] {
                        first.get_or_insert(ki);
                        count += 1;
                    }
                }
                first_idx.push(((bi * k + first.unwrap_or(0)) * l + li) as u32);
                for ki in 0..k {
                    if valid[bi * k + ki][li] {
                        weight[(bi * k + ki) * l + li] = 1.0 / count as f64;
                    }
                }
                mask[bi][li] = count > 0;
            }
        }
        let dev = stacked.device();
        let idx = Tensor::from_vec(first_idx, b * l, dev)?;
        let reference = stacked.reshape((b * k * l, d))?.index_select(&idx, 0)?.reshape((b, 1, l, d))?;
        let weight = Tensor::from_vec(weight, (b, k, l, 1), dev)?.to_dtype(self.dtype)?;
        let delta = stacked.broadcast_sub(&reference)?.broadcast_mul(&weight)?.sum(1)?;
        let mean = (reference.squeeze(1)? + delta)?;
        self.fill_placeholders(KeypointFeatureSet {
            embeddings: mean,
            mask,
            num_keypoints,
        })
    }

    fn query_memory(&self, query: &FeatureMap) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = query.values.dims4()?;
        let flat = query.values.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let memory = self.query_proj.forward(&flat)?;
        let keys = memory.broadcast_add(&self.position)?;
        Ok((memory, keys))
    }

    pub fn kim_forward(&self, keypoints: &KeypointFeatureSet, query: &FeatureMap) -> Result<KeypointFeatureSet> {
        let (b, l, d) = keypoints.embeddings.dims3()?;
        if l != self.config.slot_count || d != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "keypoint set is {l}x{d}, expected {}x{}",
                self.config.slot_count, self.config.embed_dim
            )));
        }
        if query.values.dim(0)? != b {
            return Err(Error::Shape("query features and keypoint sets differ in batch size".into()));
        }
        if let Some(row) = keypoints.mask.iter().position(|m| !m.iter().any(|&v| v)) {
            return Err(Error::Contract(format!("episode {row} has no valid keypoint slots")));
        }
        let (memory, keys) = self.query_memory(query)?;
        let valid = keypoints.mask_tensor()?;
        let mut x = keypoints.embeddings.clone();
        for block in &self.blocks {
            x = block.forward(&x, &valid, &memory, &keys)?;
        }
        Ok(KeypointFeatureSet {
            embeddings: x,
            mask: keypoints.mask.clone(),
            num_keypoints: keypoints.num_keypoints.clone(),
        })
    }

    fn valid_rows(refined: &KeypointFeatureSet) -> Result<(Vec<u32>, Vec<u32>, Vec<(usize, usize)>)> {
        let l = refined.mask.first().map_or(0, Vec::len);
        let mut rows = Vec::new();
        let mut episode = Vec::new();
        let mut slots = Vec::new();
        for (b, (mask, &j)) in refined.mask.iter().zip(&refined.num_keypoints).enumerate() {
            for (s, _) in mask.iter().enumerate().take(j).filter(|(_, &v)| v) {
                rows.push((b * l + s) as u32);
                episode.push(b as u32);
                slots.push((b, s));
            }
        }
        if rows.is_empty() {
            return Err(Error::Contract("no valid keypoint slots to decode".into()));
        }
        Ok((rows, episode, slots))
    }

    /// Decodes the first `J` valid slots of each row into heatmaps.
    pub fn matching_head_raw(&self, refined: &KeypointFeatureSet, query: &FeatureMap) -> Result<ForwardOutput> {
        let (b, l, d) = refined.embeddings.dims3()?;
        let (rows, episode, slots) = Self::valid_rows(refined)?;
        let dev = refined.embeddings.device();
        let n = rows.len();
        let feats = refined
            .embeddings
            .reshape((b * l, d))?
            .index_select(&Tensor::from_vec(rows, n, dev)?, 0)?;
        let episode = Tensor::from_vec(episode, n, dev)?;
        let heatmaps = self.head.forward(&feats, &episode, &query.values)?;
        Ok(ForwardOutput {
            heatmaps,
            slots,
            num_keypoints: refined.num_keypoints.clone(),
        })
    }

    pub fn matching_head(&self, refined: &KeypointFeatureSet, query: &FeatureMap) -> Result<Vec<PredictedHeatmaps>> {
        self.matching_head_raw(refined, query)?.to_stacks()
    }

    pub fn head(&self) -> &MatchingHead {
        &self.head
    }

    /// Full pipeline over a batch of episodes.
    pub fn forward(&self, batch: &EpisodeBatch) -> Result<ForwardOutput> {
        let b = batch.len();
        let k = batch.shots;
        let support = self.extract_features(&batch.support_images, Branch::Support)?;
        let pooled = pool_weighted_mean(&support.values, &batch.support_weights)?;
        let projected = self.keypoint_proj.forward(&pooled)?;
        let (_, l, d) = projected.dims3()?;
        let stacked = projected.reshape((b, k, l, d))?;
        let aggregated = self.aggregate_stacked(&stacked, &batch.support_valid, batch.num_keypoints.clone())?;
        let query = self.extract_features(&batch.query_images, Branch::Query)?;
        let refined = self.kim_forward(&aggregated, &query)?;
        self.matching_head_raw(&refined, &query)
    }

    /// Heatmaps for a single episode.
    pub fn predict(&self, episode: &PreparedEpisode) -> Result<PredictedHeatmaps> {
        let batch = EpisodeBatch::new(std::slice::from_ref(episode), &self.config, self.dtype)?;
        let out = self.forward(&batch)?;
        Ok(out.to_stacks()?.remove(0))
    }
}

/// Sum of squares of a tensor, as f64; handy in tests and diagnostics.
pub fn sum_sq(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.flatten_all()?.sum(D::Minus1)?.to_scalar::<f64>()?)
}
