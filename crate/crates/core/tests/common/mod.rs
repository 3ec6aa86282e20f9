#![allow(dead_code)]

use candle_core::{DType, Tensor};
use pomnet::data::{render_synthetic, ImageStore, EpisodeSampler, ShapeFamily, SplitRole, SynthConfig, SynthDataset};
use pomnet::heatmap::{encode, HeatmapStack};
use pomnet::model::{Branch, ModelConfig, ParamStore, PomNet, PredictedHeatmaps, PreparedEpisode};
use pomnet::rng::derive_seed;

pub fn small_dataset(seed: u64) -> SynthDataset {
    let families = [
        (ShapeFamily::Triangle, 8, SplitRole::Train),
        (ShapeFamily::Square, 8, SplitRole::Train),
        (ShapeFamily::Pentagon, 8, SplitRole::Test),
    ];
    render_synthetic(&SynthConfig::with_families(families), seed).unwrap()
}

pub fn episode(data: &SynthDataset, config: &ModelConfig, category: u32, shots: usize, seed: u64) -> PreparedEpisode {
    let images = ImageStore::new();
    let ep = EpisodeSampler::new(&data.instances).sample(category, shots, seed).unwrap();
    PreparedEpisode::prepare(&ep, &images, &config.preprocess(), false, seed).unwrap()
}

pub fn model(config: &ModelConfig, dtype: DType, seed: u64) -> PomNet {
    let mut store = ParamStore::new(dtype, seed);
    PomNet::new(config, &mut store).unwrap()
}

pub fn max_abs(a: &HeatmapStack, b: &HeatmapStack) -> f64 {
    assert_eq!(a.values.len(), b.values.len());
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Largest change in the valid heatmaps after overwriting every masked-out
/// slot embedding with noise.
pub fn padding_fuzz(net: &PomNet, ep: &PreparedEpisode, seed: u64) -> f64 {
    let cfg = net.config();
    let hm = cfg.heatmap_resolution;
    let images = |s: &pomnet::data::ProcessedSample| {
        Tensor::from_vec(s.image.clone(), (1, 3, cfg.input_size, cfg.input_size), &candle_core::Device::Cpu)
            .unwrap()
            .to_dtype(net.dtype())
            .unwrap()
    };
    let sup = &ep.supports[0];
    let labeled = sup.labeled();
    let stack = encode(&sup.keypoints_hm, &labeled, cfg.gaussian(), (hm, hm));
    let sfeat = net.extract_features(&images(sup), Branch::Support).unwrap();
    let set = net.pool_keypoint_features(&sfeat, &[stack], &[labeled]).unwrap();
    let query = net.extract_features(&images(&ep.query), Branch::Query).unwrap();
    let reference = net.matching_head(&net.kim_forward(&set, &query).unwrap(), &query).unwrap();

    let (_, l, d) = set.embeddings.dims3().unwrap();
    let noise = Tensor::randn(0f32, 10.0, (1, l, d), &candle_core::Device::Cpu).unwrap();
    let _ = seed;
    let mask = set.mask_tensor().unwrap().unsqueeze(2).unwrap().broadcast_as((1, l, d)).unwrap();
    let fuzzed = pomnet::model::KeypointFeatureSet {
        embeddings: mask.where_cond(&set.embeddings, &noise.to_dtype(net.dtype()).unwrap()).unwrap(),
        ..set.clone()
    };
    let out = net.matching_head(&net.kim_forward(&fuzzed, &query).unwrap(), &query).unwrap();
    assert_eq!(out[0].predicted, reference[0].predicted);
    max_abs(&out[0].stack, &reference[0].stack)
}

/// Reorders keypoints of every episode member by `perm` (new j holds old
/// `perm[j]`).
pub fn permute_episode(ep: &PreparedEpisode, perm: &[usize]) -> PreparedEpisode {
    let mut out = ep.clone();
    for s in out.supports.iter_mut().chain(std::iter::once(&mut out.query)) {
        let kp = s.keypoints_hm.clone();
        let vis = s.visibility.clone();
        s.keypoints_hm = perm.iter().map(|&p| kp[p]).collect();
        s.visibility = perm.iter().map(|&p| vis[p]).collect();
    }
    out
}

/// Largest deviation between permuted predictions and predictions of the
/// permuted episode.
pub fn permutation_error(net: &PomNet, ep: &PreparedEpisode, perm: &[usize]) -> f64 {
    let a: PredictedHeatmaps = net.predict(ep).unwrap();
    let b = net.predict(&permute_episode(ep, perm)).unwrap();
    let mut worst = 0f64;
    for (new, &old) in perm.iter().enumerate() {
        assert_eq!(b.predicted[new], a.predicted[old]);
        for (x, y) in b.stack.channel(new).iter().zip(a.stack.channel(old)) {
            worst = worst.max((x - y).abs() as f64);
        }
    }
    worst
}

/// Predictions with the single support repeated `k` times equal the 1-shot
/// predictions bit for bit.
pub fn kshot_identical(net: &PomNet, ep: &PreparedEpisode, k: usize) -> bool {
    let mut one = ep.clone();
    one.supports.truncate(1);
    one.support_ids.truncate(1);
    let mut many = one.clone();
    many.supports = vec![one.supports[0].clone(); k];
    many.support_ids = vec![one.support_ids[0]; k];
    let a = net.predict(&one).unwrap();
    let b = net.predict(&many).unwrap();
    a.predicted == b.predicted && a.stack.values.iter().zip(&b.stack.values).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn seeded(base: u64, i: u64) -> u64 {
    derive_seed(base, &[i])
}

/// Feature map sampled at fractional `(y, x)` by bilinear interpolation.
fn bilinear_at(f: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    f[y0 * w + x0] * (1.0 - ty) * (1.0 - tx)
        + f[y0 * w + x1] * (1.0 - ty) * tx
        + f[y1 * w + x0] * ty * (1.0 - tx)
        + f[y1 * w + x1] * ty * tx
}

/// Upsamples one feature channel to the heatmap grid (corner-aligned) and
/// takes the heatmap-weighted mean there.
pub fn brute_force_pool(feature: &[f64], (h, w): (usize, usize), heatmap: &[f32], (hh, hw): (usize, usize)) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for v in 0..hh {
        for u in 0..hw {
            let sy = v as f64 * (h - 1) as f64 / (hh - 1) as f64;
            let sx = u as f64 * (w - 1) as f64 / (hw - 1) as f64;
            let m = heatmap[v * hw + u] as f64;
            num += m * bilinear_at(feature, h, w, sy, sx);
            den += m;
        }
    }
    num / den
}

/// Worst relative error of the tensor pooling path against
/// [`brute_force_pool`] over `pairs` random (feature map, heatmap) pairs.
pub fn pooling_error(pairs: usize, seed: u64) -> f64 {
    use pomnet::heatmap::GaussianSpec;
    use pomnet::model::{pool_weighted_mean, support_pooling_rows};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dev = candle_core::Device::Cpu;
    let mut worst = 0f64;
    for _ in 0..pairs {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(2..9));
        let (hh, hw) = (4 * h, 4 * w);
        let j = rng.random_range(1..4);
        let feats: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pts: Vec<[f64; 2]> = (0..j)
            .map(|_| [rng.random_range(0.0..(hw - 1) as f64), rng.random_range(0.0..(hh - 1) as f64)])
            .collect();
        let stack = encode(&pts, &vec![true; j], GaussianSpec::new(rng.random_range(0.7..3.0)), (hh, hw));
        let (rows, valid) = support_pooling_rows(&stack, &vec![true; j], j, (h, w));
        assert!(valid.iter().all(|&v| v));
        let ft = Tensor::from_vec(feats.clone(), (1, c, h, w), &dev).unwrap();
        let wt = Tensor::from_vec(rows, (1, j, h * w), &dev).unwrap();
        let pooled = pool_weighted_mean(&ft, &wt).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for k in 0..j {
            for ch in 0..c {
                let oracle = brute_force_pool(&feats[ch * h * w..(ch + 1) * h * w], (h, w), stack.channel(k), (hh, hw));
                let got = pooled[k * c + ch];
                worst = worst.max((got - oracle).abs() / oracle.abs().max(1e-12));
            }
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub group: String,
    pub worst_rel: f64,
    pub checked: usize,
}

/// Central-difference check of every parameter group of a float64 model on
/// the episode loss. Per group the largest-magnitude entries plus a few
/// random ones are checked.
pub fn gradient_check(config: &ModelConfig, episodes: &[PreparedEpisode], seed: u64) -> Vec<GradCheck> {
    use pomnet::train::EpisodicModel;
    use rand::{Rng, SeedableRng};
    let mut store32 = ParamStore::new(DType::F32, seed);
    PomNet::new(config, &mut store32).unwrap();
    let mut store = store32.to_dtype(DType::F64).unwrap();
    let net = PomNet::new(config, &mut store).unwrap();
    let loss = |net: &PomNet| net.batch_loss(episodes).unwrap().expect("supervised batch");
    let grads = loss(&net).loss.backward().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // larger steps cross ReLU kinks in the early conv layers
    let step = 1e-6;
    let names: Vec<String> = store.vars().map(|(n, _)| n.to_string()).collect();
    let mut out = Vec::new();
    for name in names {
        let var = store.get(&name).unwrap().clone();
        let shape = var.as_tensor().dims().to_vec();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let g = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().partial_cmp(&g[a].abs()).unwrap());
        let mut picks: Vec<usize> = order.iter().take(3).copied().collect();
        for _ in 0..2 {
            picks.push(rng.random_range(0..base.len()));
        }
        picks.sort_unstable();
        picks.dedup();
        let mut worst = 0f64;
        for &i in &picks {
            let eval_at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &candle_core::Device::Cpu).unwrap()).unwrap();
                loss(&net).value
            };
            let numeric = (eval_at(step) - eval_at(-step)) / (2.0 * step);
            let analytic = g[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &candle_core::Device::Cpu).unwrap()).unwrap();
        out.push(GradCheck { group: name, worst_rel: worst, checked: picks.len() });
    }
    out
}

/// Independent PCK count: a labeled keypoint is correct when its distance
/// to the prediction, divided by the longer box side, is at most `sigma`.
pub fn brute_force_pck(pred: &[(f64, f64)], gt: &[pomnet::data::Keypoint], bbox: &pomnet::data::BBox, sigma: f64) -> (usize, usize) {
    let side = if bbox.w > bbox.h { bbox.w } else { bbox.h };
    let mut correct = 0;
    let mut total = 0;
    for i in 0..gt.len() {
        if gt[i].v == pomnet::data::Visibility::Unlabeled {
            continue;
        }
        total += 1;
        let dx = pred[i].0 - gt[i].x;
        let dy = pred[i].1 - gt[i].y;
        if (dx * dx + dy * dy).sqrt() / side <= sigma {
            correct += 1;
        }
    }
    (correct, total)
}

/// Number of mismatches between `pck` and [`brute_force_pck`] over `cases`
/// random cases, a fifth of them placed exactly on the threshold.
pub fn pck_mismatches(cases: usize, seed: u64) -> (usize, usize) {
    use pomnet::data::{BBox, Keypoint, Visibility};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut boundary_hits = 0;
    for case in 0..cases {
        let n = rng.random_range(1..10);
        let on_boundary = case % 5 == 0;
        let (bbox, sigma) = if on_boundary {
            let k = rng.random_range(1..40) as f64;
            (BBox::new(rng.random_range(0.0..50.0), 0.0, 5.0 * k, rng.random_range(1.0..5.0 * k)), 0.2)
        } else {
            (
                BBox::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(5.0..200.0), rng.random_range(5.0..200.0)),
                rng.random_range(0.01..0.5),
            )
        };
        let mut gt = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..n {
            let v = match rng.random_range(0..3) {
                0 => Visibility::Unlabeled,
                1 => Visibility::Occluded,
                _ => Visibility::Visible,
            };
            let (x, y) = (rng.random_range(0.0..200.0f64).round(), rng.random_range(0.0..200.0f64).round());
            gt.push(Keypoint::new(x, y, v));
            if on_boundary {
                // offset of exactly sigma * side along one axis
                let d = bbox.longest_side() / 5.0;
                pred.push(if rng.random_bool(0.5) { (x + d, y) } else { (x, y - d) });
            } else {
                pred.push((x + rng.random_range(-60.0..60.0), y + rng.random_range(-60.0..60.0)));
            }
        }
        let got = pck(&pred, &gt, &bbox, sigma);
        let (c, t) = brute_force_pck(&pred, &gt, &bbox, sigma);
        if (got.correct, got.evaluated) != (c, t) {
            mismatches += 1;
        }
        if on_boundary && c == t && t > 0 {
            boundary_hits += 1;
        }
    }
    (mismatches, boundary_hits)
}

use pomnet::eval::pck;

/// Worst decode(encode(p)) error in heatmap cells over `cases` random
/// in-grid points with the given Gaussian width.
pub fn round_trip_error(cases: usize, sigma: f64, size: usize, seed: u64) -> f64 {
    use pomnet::heatmap::{decode, GaussianSpec};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..cases {
        let p = [rng.random_range(0.0..(size - 1) as f64), rng.random_range(0.0..(size - 1) as f64)];
        let stack = encode(&[p], &[true], GaussianSpec::new(sigma), (size, size));
        let peak = decode(&stack)[0];
        worst = worst.max((peak.x - p[0]).abs().max((peak.y - p[1]).abs()));
    }
    worst
}
