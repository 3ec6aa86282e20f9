//! Shared fixtures for the benchmarks.

use candle_core::DType;
use pomnet::data::{render_synthetic, EpisodeSampler, ImageStore, ShapeFamily, SplitRole, SynthConfig, SynthDataset};
use pomnet::model::{ModelConfig, ParamStore, PreparedEpisode};
use pomnet::train::EpisodicModel;

pub fn dataset() -> SynthDataset {
    let families = [
        (ShapeFamily::Triangle, 12, SplitRole::Train),
        (ShapeFamily::Hexagon, 12, SplitRole::Train),
    ];
    render_synthetic(&SynthConfig::with_families(families), 11).unwrap()
}

/// `count` prepared episodes of the hexagon category (6 keypoints).
pub fn episodes(data: &SynthDataset, config: &ModelConfig, shots: usize, count: usize) -> Vec<PreparedEpisode> {
    let images = ImageStore::new();
    let sampler = EpisodeSampler::new(&data.instances);
    let hexagon = data.categories.iter().find(|c| c.name == "hexagon").unwrap().id;
    (0..count as u64)
        .map(|seed| {
            let ep = sampler.sample(hexagon, shots, seed).unwrap();
            PreparedEpisode::prepare(&ep, &images, &config.preprocess(), false, seed).unwrap()
        })
        .collect()
}

pub fn model<M: EpisodicModel>(config: &ModelConfig) -> M {
    let mut store = ParamStore::new(DType::F32, 0);
    M::build(config, &mut store).unwrap()
}
