//! Episode preparation and batching into tensors.

use candle_core::{DType, Device, Tensor};

use super::config::ModelConfig;
use crate::data::{Episode, ImageStore, PreprocessConfig, ProcessedSample};
use crate::error::{Error, Result};
use crate::heatmap::{encode, pooling_weights, HeatmapStack};
use crate::rng::derive_seed;

/// An episode whose members have been cropped and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEpisode {
    pub category_id: u32,
    pub supports: Vec<ProcessedSample>,
    pub query: ProcessedSample,
    pub support_ids: Vec<u64>,
    pub query_id: u64,
}

impl PreparedEpisode {
    /// Preprocesses every member; member `i` draws its augmentation from
    /// `derive_seed(seed, [i])`, the query being member 0.
    pub fn prepare(
        episode: &Episode,
        images: &ImageStore,
        config: &PreprocessConfig,
        augment: bool,
        seed: u64,
    ) -> Result<Self> {
        let prep = |inst: &crate::data::InstanceAnnotation, i: u64| -> Result<ProcessedSample> {
            let img = images.get(&inst.image)?;
            crate::data::preprocess(inst, &img, config, augment, derive_seed(seed, &[i]))
        };
        let query = prep(&episode.query, 0)?;
        let supports = episode
            .supports
            .iter()
            .enumerate()
            .map(|(i, s)| prep(s, i as u64 + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            category_id: episode.category_id,
            supports,
            query,
            support_ids: episode.supports.iter().map(|s| s.id).collect(),
            query_id: episode.query.id,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.query.num_keypoints()
    }

    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn describe(&self) -> String {
        format!(
            "category {} query {} supports {:?}",
            self.category_id, self.query_id, self.support_ids
        )
    }
}

/// Pooling weights over the `h x w` feature grid for every keypoint slot of
/// one support, from its ground-truth Gaussian heatmaps. Rows of slots that
/// are padding, unlabeled or carry no heatmap mass are zero and flagged
/// invalid.
pub fn support_pooling_rows(
    heatmaps: &HeatmapStack,
    labeled: &[bool],
    slots: usize,
    feature_hw: (usize, usize),
) -> (Vec<f64>, Vec<bool>) {
    let cells = feature_hw.0 * feature_hw.1;
    let mut rows = vec![0.0; slots * cells];
    let mut valid = vec![false; slots];
    for j in 0..heatmaps.channels.min(slots) {
        if !labeled[j] {
            continue;
        }
        if let Some(w) = pooling_weights(heatmaps.channel(j), (heatmaps.height, heatmaps.width), feature_hw) {
            rows[j * cells..(j + 1) * cells].copy_from_slice(&w);
            valid[j] = true;
        }
    }
    (rows, valid)
}

/// `B` episodes with a common shot count, as model inputs.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    /// `(B * K, 3, S, S)`, episode-major.
    pub support_images: Tensor,
    /// `(B * K, L, h * w)`.
    pub support_weights: Tensor,
    /// `B * K` rows of `L` flags.
    pub support_valid: Vec<Vec<bool>>,
    /// `(B, 3, S, S)`.
    pub query_images: Tensor,
    pub num_keypoints: Vec<usize>,
    pub shots: usize,
}

impl EpisodeBatch {
    pub fn new(episodes: &[PreparedEpisode], config: &ModelConfig, dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let first = episodes
            .first()
            .ok_or_else(|| Error::Contract("empty episode batch".into()))?;
        let shots = first.shots();
        if shots == 0 {
            return Err(Error::Contract("episodes need at least one support".into()));
        }
        let s = config.input_size;
        let hm = config.heatmap_resolution;
        let f = config.feature_size();
        let slots = config.slot_count;
        let gaussian = config.gaussian();

        let mut support_pixels = Vec::with_capacity(episodes.len() * shots * 3 * s * s);
        let mut weights = Vec::with_capacity(episodes.len() * shots * slots * f * f);
        let mut support_valid = Vec::with_capacity(episodes.len() * shots);
        let mut query_pixels = Vec::with_capacity(episodes.len() * 3 * s * s);
        let mut num_keypoints = Vec::with_capacity(episodes.len());
        for ep in episodes {
            if ep.shots() != shots {
                return Err(Error::Contract(format!(
                    "mixed shot counts in one batch ({} vs {shots})",
                    ep.shots()
                )));
            }
            let j = ep.num_keypoints();
            config.check_keypoints(j)?;
            for sample in ep.supports.iter().chain(std::iter::once(&ep.query)) {
                if sample.input_size != s || sample.heatmap_resolution != hm {
                    return Err(Error::Shape(format!(
                        "sample prepared at {}px / {} cells, model expects {s} / {hm}",
                        sample.input_size, sample.heatmap_resolution
                    )));
                }
                if sample.num_keypoints() != j {
                    return Err(Error::Contract("episode members disagree on keypoint count".into()));
                }
            }
            for sup in &ep.supports {
                support_pixels.extend_from_slice(&sup.image);
                let labeled = sup.labeled();
                let maps = encode(&sup.keypoints_hm, &labeled, gaussian, (hm, hm));
                let (rows, valid) = support_pooling_rows(&maps, &labeled, slots, (f, f));
                weights.extend(rows);
                support_valid.push(valid);
            }
            query_pixels.extend_from_slice(&ep.query.image);
            num_keypoints.push(j);
        }
        let b = episodes.len();
        Ok(Self {
            support_images: Tensor::from_vec(support_pixels, (b * shots, 3, s, s), &device)?.to_dtype(dtype)?,
            support_weights: Tensor::from_vec(weights, (b * shots, slots, f * f), &device)?.to_dtype(dtype)?,
            support_valid,
            query_images: Tensor::from_vec(query_pixels, (b, 3, s, s), &device)?.to_dtype(dtype)?,
            num_keypoints,
            shots,
        })
    }

    pub fn len(&self) -> usize {
        self.num_keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_keypoints.is_empty()
    }
}
