//! PCK and the episodic evaluation protocol.
//!
//! A keypoint is correct when its prediction lies within `sigma` times the
//! longest side of the ground-truth box. Unlabeled (v = 0) keypoints are
//! excluded; occluded-but-labeled ones are evaluated. Categories are averaged
//! without weighting.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, EpisodeSampler, ImageStore, InstanceAnnotation, Keypoint, PreprocessConfig};
use crate::error::{Error, Result};
use crate::heatmap::{decode, Peak};
use crate::model::{PomNet, PreparedEpisode};
use crate::rng::{derive_seed, rng_for};

/// Anything that turns a prepared episode into query keypoints, expressed in
/// the query's heatmap coordinates. `None` marks a keypoint it cannot predict.
pub trait KeypointPredictor: Sync {
    fn name(&self) -> &str;
    fn preprocess_config(&self) -> PreprocessConfig;
    fn predict_keypoints(&self, episode: &PreparedEpisode) -> Result<Vec<Option<Peak>>>;
}

impl KeypointPredictor for PomNet {
    fn name(&self) -> &str {
        "pomnet"
    }

    fn preprocess_config(&self) -> PreprocessConfig {
        self.config().preprocess()
    }

    fn predict_keypoints(&self, episode: &PreparedEpisode) -> Result<Vec<Option<Peak>>> {
        let out = self.predict(episode)?;
        Ok(decode(&out.stack)
            .into_iter()
            .zip(&out.predicted)
            .map(|(p, &ok)| ok.then_some(p))
            .collect())
    }
}

/// Returns the query's own ground truth; an upper bound for the protocol.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub preprocess: PreprocessConfig,
}

impl KeypointPredictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn preprocess_config(&self) -> PreprocessConfig {
        self.preprocess
    }

    fn predict_keypoints(&self, episode: &PreparedEpisode) -> Result<Vec<Option<Peak>>> {
        Ok(episode
            .query
            .keypoints_hm
            .iter()
            .map(|&[x, y]| Some(Peak { x, y, confidence: 1.0 }))
            .collect())
    }
}

/// Uniformly random locations on the heatmap grid, seeded per query.
#[derive(Debug, Clone)]
pub struct UniformPredictor {
    pub preprocess: PreprocessConfig,
    pub seed: u64,
}

impl KeypointPredictor for UniformPredictor {
    fn name(&self) -> &str {
        "uniform"
    }

    fn preprocess_config(&self) -> PreprocessConfig {
        self.preprocess
    }

    fn predict_keypoints(&self, episode: &PreparedEpisode) -> Result<Vec<Option<Peak>>> {
        let mut path = vec![episode.query_id];
        path.extend(&episode.support_ids);
        let mut rng = rng_for(self.seed, &path);
        let extent = episode.query.heatmap_resolution as f64;
        Ok((0..episode.num_keypoints())
            .map(|_| {
                Some(Peak {
                    x: rng.random_range(0.0..extent),
                    y: rng.random_range(0.0..extent),
                    confidence: 0.0,
                })
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PckCount {
    pub correct: usize,
    pub evaluated: usize,
}

impl std::ops::AddAssign for PckCount {
    fn add_assign(&mut self, rhs: Self) {
        self.correct += rhs.correct;
        self.evaluated += rhs.evaluated;
    }
}

impl PckCount {
    pub fn fraction(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.correct as f64 / self.evaluated as f64
        }
    }
}

/// PCK over one instance with pixel-space predictions.
pub fn pck(pred: &[(f64, f64)], gt: &[Keypoint], bbox: &BBox, sigma: f64) -> PckCount {
    let pred: Vec<_> = pred.iter().copied().map(Some).collect();
    pck_partial(&pred, gt, bbox, sigma)
}

/// As [`pck`]; a missing prediction for a labeled keypoint counts as wrong.
pub fn pck_partial(pred: &[Option<(f64, f64)>], gt: &[Keypoint], bbox: &BBox, sigma: f64) -> PckCount {
    let d = bbox.longest_side();
    let mut count = PckCount::default();
    for (p, g) in pred.iter().zip(gt) {
        if !g.v.is_labeled() {
            continue;
        }
        count.evaluated += 1;
        if let Some((x, y)) = p {
            let dist = ((x - g.x).powi(2) + (y - g.y).powi(2)).sqrt();
            if dist / d <= sigma {
                count.correct += 1;
            }
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckConfig {
    pub sigma: f64,
    pub episodes_per_category: usize,
    #[serde(rename = "K")]
    pub shots: usize,
    pub seed: u64,
}

impl PckConfig {
    pub fn new(sigma: f64, episodes_per_category: usize, shots: usize, seed: u64) -> Self {
        Self {
            sigma,
            episodes_per_category,
            shots,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::Config(format!("sigma {} outside (0, 1]", self.sigma)));
        }
        if self.episodes_per_category == 0 || self.shots == 0 {
            return Err(Error::Config("episodes_per_category and K must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPck {
    pub pck: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub sigma: f64,
    #[serde(rename = "K")]
    pub shots: usize,
    pub per_category: BTreeMap<u32, CategoryPck>,
    pub mean: f64,
    pub seed: u64,
    pub episodes_per_category: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<String>,
    #[serde(default)]
    pub failed_episodes: usize,
}

/// Per-episode seed used by [`evaluate`].
pub fn episode_seed(config: &PckConfig, category: u32, episode: usize) -> u64 {
    derive_seed(config.seed, &[category as u64, episode as u64])
}

/// Runs `episodes_per_category` random episodes on each category, decodes,
/// maps predictions back to query pixels and accumulates PCK.
pub fn evaluate(
    predictor: &dyn KeypointPredictor,
    pool: &[InstanceAnnotation],
    images: &ImageStore,
    categories: &BTreeSet<u32>,
    config: &PckConfig,
) -> Result<PckResult> {
    config.validate()?;
    if categories.is_empty() {
        return Err(Error::Eval("no categories to evaluate".into()));
    }
    let sampler = EpisodeSampler::new(pool);
    for &c in categories {
        if sampler.available(c) < config.shots + 1 {
            return Err(Error::Sampling {
                category: c,
                available: sampler.available(c),
                needed: config.shots + 1,
            });
        }
    }
    let preprocess = predictor.preprocess_config();
    let mut per_category = BTreeMap::new();
    let mut failures = 0usize;
    let mut attempted = 0usize;
    for &c in categories {
        let mut count = PckCount::default();
        for e in 0..config.episodes_per_category {
            attempted += 1;
            let seed = episode_seed(config, c, e);
            let episode = sampler.sample(c, config.shots, seed)?;
            let prepared = PreparedEpisode::prepare(&episode, images, &preprocess, false, seed)?;
            let preds = match predictor.predict_keypoints(&prepared) {
                Ok(p) if p.len() == episode.query.keypoints.len() => p,
                _ => {
                    failures += 1;
                    continue;
                }
            };
            let pixels: Vec<_> = preds
                .iter()
                .map(|p| p.map(|p| prepared.query.heatmap_to_pixels(p.x, p.y)))
                .collect();
            count += pck_partial(&pixels, &episode.query.keypoints, &episode.query.bbox, config.sigma);
        }
        per_category.insert(
            c,
            CategoryPck {
                pck: count.fraction(),
                count: count.evaluated,
            },
        );
    }
    if failures * 100 > attempted {
        return Err(Error::Eval(format!(
            "{failures} of {attempted} episodes failed in predictor {}",
            predictor.name()
        )));
    }
    let mean = per_category.values().map(|c| c.pck).sum::<f64>() / per_category.len() as f64;
    Ok(PckResult {
        sigma: config.sigma,
        shots: config.shots,
        per_category,
        mean,
        seed: config.seed,
        episodes_per_category: config.episodes_per_category,
        predictor: Some(predictor.name().to_string()),
        failed_episodes: failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_synthetic, ShapeFamily, SplitRole, SynthConfig, Visibility};
    use proptest::prelude::*;

    fn kp(x: f64, y: f64, v: Visibility) -> Keypoint {
        Keypoint::new(x, y, v)
    }

    #[test]
    fn exact_predictions_are_correct() {
        let gt = vec![kp(1.0, 2.0, Visibility::Visible), kp(5.0, 5.0, Visibility::Occluded), kp(0.0, 0.0, Visibility::Unlabeled)];
        let pred: Vec<_> = gt.iter().map(|k| (k.x, k.y)).collect();
        let c = pck(&pred, &gt, &BBox::new(0.0, 0.0, 10.0, 10.0), 0.2);
        assert_eq!(c, PckCount { correct: 2, evaluated: 2 });
    }

    #[test]
    fn hand_evaluated_case() {
        let c = pck(&[(10.0, 10.0)], &[kp(10.0, 20.0, Visibility::Visible)], &BBox::new(0.0, 0.0, 100.0, 40.0), 0.2);
        assert_eq!(c.correct, 1);
        let c = pck(&[(10.0, 10.0)], &[kp(10.0, 31.0, Visibility::Visible)], &BBox::new(0.0, 0.0, 100.0, 40.0), 0.2);
        assert_eq!(c.correct, 0);
    }

    #[test]
    fn boundary_ratio_counts_as_correct() {
        // distance 25 over side 125 is exactly 0.2 in binary floating point
        let c = pck(&[(0.0, 0.0)], &[kp(15.0, 20.0, Visibility::Visible)], &BBox::new(0.0, 0.0, 125.0, 50.0), 0.2);
        assert_eq!(25.0 / 125.0, 0.2);
        assert_eq!(c.correct, 1);
    }

    #[test]
    fn missing_prediction_counts_wrong() {
        let c = pck_partial(&[None], &[kp(1.0, 1.0, Visibility::Visible)], &BBox::new(0.0, 0.0, 4.0, 4.0), 0.2);
        assert_eq!(c, PckCount { correct: 0, evaluated: 1 });
    }

    proptest! {
        #[test]
        fn translation_and_scale_invariance(
            pts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0), 1..8),
            tx in -100.0f64..100.0, ty in -100.0f64..100.0, k in 1u32..8,
        ) {
            let bbox = BBox::new(0.0, 0.0, 50.0, 30.0);
            let gt: Vec<_> = pts.iter().map(|p| kp(p.0, p.1, Visibility::Visible)).collect();
            let pred: Vec<_> = pts.iter().map(|p| (p.2, p.3)).collect();
            let base = pck(&pred, &gt, &bbox, 0.2);
            // integer shifts keep the arithmetic exact up to rounding of the
            // same magnitude on both sides; powers of two scale exactly
            let s = 2f64.powi(k as i32 - 4);
            let gt2: Vec<_> = gt.iter().map(|g| kp(g.x * s, g.y * s, g.v)).collect();
            let pred2: Vec<_> = pred.iter().map(|p| (p.0 * s, p.1 * s)).collect();
            prop_assert_eq!(base, pck(&pred2, &gt2, &BBox::new(0.0, 0.0, 50.0 * s, 30.0 * s), 0.2));
            let (tx, ty) = (tx.round(), ty.round());
            let gt3: Vec<_> = gt.iter().map(|g| kp(g.x + tx, g.y + ty, g.v)).collect();
            let pred3: Vec<_> = pred.iter().map(|p| (p.0 + tx, p.1 + ty)).collect();
            let moved = pck(&pred3, &gt3, &BBox::new(tx, ty, 50.0, 30.0), 0.2);
            // translation may flip a case sitting within rounding of the threshold
            prop_assert!((moved.correct as i64 - base.correct as i64).abs() <= 1);
            prop_assert_eq!(moved.evaluated, base.evaluated);
        }

        #[test]
        fn monotone_in_sigma(
            pts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0), 1..8),
            s1 in 0.01f64..1.0, s2 in 0.01f64..1.0,
        ) {
            let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
            let bbox = BBox::new(0.0, 0.0, 50.0, 50.0);
            let gt: Vec<_> = pts.iter().map(|p| kp(p.0, p.1, Visibility::Visible)).collect();
            let pred: Vec<_> = pts.iter().map(|p| (p.2, p.3)).collect();
            prop_assert!(pck(&pred, &gt, &bbox, lo).correct <= pck(&pred, &gt, &bbox, hi).correct);
        }
    }

    fn small_dataset() -> (Vec<InstanceAnnotation>, BTreeSet<u32>) {
        let cfg = SynthConfig::with_families([
            (ShapeFamily::Triangle, 8, SplitRole::Test),
            (ShapeFamily::Cross, 8, SplitRole::Test),
        ]);
        let data = render_synthetic(&cfg, 5).unwrap();
        (data.instances, data.split.test)
    }

    #[test]
    fn oracle_scores_one_and_is_deterministic() {
        let (pool, test) = small_dataset();
        let images = ImageStore::new();
        let oracle = OraclePredictor {
            preprocess: PreprocessConfig::new(64, 16),
        };
        let cfg = PckConfig::new(0.2, 10, 1, 3);
        let r = evaluate(&oracle, &pool, &images, &test, &cfg).unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(r.per_category.values().all(|c| c.pck == 1.0 && c.count > 0));
        assert_eq!(r, evaluate(&oracle, &pool, &images, &test, &cfg).unwrap());
    }

    #[test]
    fn mean_is_unweighted() {
        let (pool, test) = small_dataset();
        let uniform = UniformPredictor {
            preprocess: PreprocessConfig::new(64, 16),
            seed: 1,
        };
        let r = evaluate(&uniform, &pool, &ImageStore::new(), &test, &PckConfig::new(0.2, 20, 2, 0)).unwrap();
        let mean = r.per_category.values().map(|c| c.pck).sum::<f64>() / 2.0;
        assert!((r.mean - mean).abs() < 1e-12);
        // cross has 4x the keypoints of triangle yet the same weight
        assert_eq!(r.per_category[&2].count, 4 * r.per_category[&1].count);
    }

    struct Failing;
    impl KeypointPredictor for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn preprocess_config(&self) -> PreprocessConfig {
            PreprocessConfig::new(32, 8)
        }
        fn predict_keypoints(&self, _: &PreparedEpisode) -> Result<Vec<Option<Peak>>> {
            Err(Error::Eval("boom".into()))
        }
    }

    #[test]
    fn predictor_failures_abort_beyond_one_percent() {
        let (pool, test) = small_dataset();
        let err = evaluate(&Failing, &pool, &ImageStore::new(), &test, &PckConfig::new(0.2, 3, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Eval(_)));
    }

    #[test]
    fn insufficient_instances_is_sampling_error() {
        let (pool, test) = small_dataset();
        let oracle = OraclePredictor {
            preprocess: PreprocessConfig::new(32, 8),
        };
        let err = evaluate(&oracle, &pool, &ImageStore::new(), &test, &PckConfig::new(0.2, 1, 8, 0)).unwrap_err();
        assert!(matches!(err, Error::Sampling { .. }));
    }
}
