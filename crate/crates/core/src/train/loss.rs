use candle_core::{DType, Tensor};

use crate::data::ProcessedSample;
use crate::error::{Error, Result};
use crate::heatmap::{encode, GaussianSpec, HeatmapStack};
use crate::model::ForwardOutput;

/// Heatmap MSE for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Mean squared error of each channel; zero for unsupervised channels.
    pub per_keypoint: Vec<f64>,
    pub supervised: usize,
}

/// Pixel-wise MSE over supervised channels, normalized by the number of
/// supervised channels times the heatmap area.
pub fn mse_loss(pred: &HeatmapStack, target: &HeatmapStack, supervised: &[bool]) -> Result<LossReport> {
    if (pred.channels, pred.height, pred.width) != (target.channels, target.height, target.width) {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs target {}x{}x{}",
            pred.channels, pred.height, pred.width, target.channels, target.height, target.width
        )));
    }
    if supervised.len() != pred.channels {
        return Err(Error::Shape(format!(
            "{} supervision flags for {} channels",
            supervised.len(),
            pred.channels
        )));
    }
    let area = (pred.height * pred.width) as f64;
    let mut per_keypoint = vec![0.0; pred.channels];
    for (j, _) in supervised.iter().enumerate().filter(|(_, &s)| s) {
        let sq: f64 = pred
            .channel(j)
            .iter()
            .zip(target.channel(j))
            .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
            .sum();
        per_keypoint[j] = sq / area;
    }
    let count = supervised.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::Loss("no supervised keypoints".into()));
    }
    Ok(LossReport {
        loss: per_keypoint.iter().sum::<f64>() / count as f64,
        per_keypoint,
        supervised: count,
    })
}

/// Differentiable loss over a batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: Tensor,
    pub value: f64,
    pub supervised: usize,
    /// Episodes that contributed (had at least one supervised keypoint).
    pub episodes: usize,
}

/// Per-row weights and targets for the rows of a forward pass: a row is
/// supervised when its query keypoint is labeled. Each episode's rows are
/// weighted `1 / (J_sup * H * W)`, then episodes are averaged.
pub fn heatmap_targets(
    output: &ForwardOutput,
    queries: &[&ProcessedSample],
    gaussian: GaussianSpec,
) -> Result<(Vec<f32>, Vec<f64>, usize, usize)> {
    let (n, h, w) = output.heatmaps.dims3()?;
    if queries.len() != output.num_keypoints.len() {
        return Err(Error::Shape("one query per episode".into()));
    }
    let mut supervised_per_episode = vec![0usize; queries.len()];
    let labeled: Vec<Vec<bool>> = queries.iter().map(|q| q.labeled()).collect();
    for &(b, j) in &output.slots {
        if labeled[b][j] {
            supervised_per_episode[b] += 1;
        }
    }
    let episodes = supervised_per_episode.iter().filter(|&&c| c > 0).count();
    let mut targets = vec![0f32; n * h * w];
    let mut weights = vec![0f64; n];
    let stacks: Vec<HeatmapStack> = queries
        .iter()
        .zip(&labeled)
        .map(|(q, l)| encode(&q.keypoints_hm, l, gaussian, (h, w)))
        .collect();
    for (row, &(b, j)) in output.slots.iter().enumerate() {
        if !labeled[b][j] {
            continue;
        }
        targets[row * h * w..(row + 1) * h * w].copy_from_slice(stacks[b].channel(j));
        weights[row] = 1.0 / (supervised_per_episode[b] as f64 * (h * w) as f64 * episodes as f64);
    }
    let supervised = supervised_per_episode.iter().sum();
    Ok((targets, weights, supervised, episodes))
}

/// Batch MSE; `None` when no episode has a supervised keypoint.
pub fn heatmap_loss(output: &ForwardOutput, queries: &[&ProcessedSample], gaussian: GaussianSpec) -> Result<Option<BatchLoss>> {
    let (targets, weights, supervised, episodes) = heatmap_targets(output, queries, gaussian)?;
    if episodes == 0 {
        return Ok(None);
    }
    let pred = &output.heatmaps;
    let (n, h, w) = pred.dims3()?;
    let dtype = pred.dtype();
    let target = Tensor::from_vec(targets, (n, h, w), pred.device())?.to_dtype(dtype)?;
    let weights = Tensor::from_vec(weights, n, pred.device())?.to_dtype(dtype)?;
    let per_row = (pred - target)?.sqr()?.sum((1, 2))?;
    let loss = (per_row * weights)?.sum_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(Some(BatchLoss {
        loss,
        value,
        supervised,
        episodes,
    }))
}
