//! The pose matching network: two feature extractors, heatmap-weighted
//! keypoint pooling, the Keypoint Interaction Module and the matching head.

mod backbone;
mod batch;
mod config;
mod head;
mod kim;
pub mod layers;
mod params;
mod pomnet;
mod unfold;

pub use backbone::Backbone;
pub use batch::{support_pooling_rows, EpisodeBatch, PreparedEpisode};
pub use config::{BackboneConfig, ModelConfig};
pub use head::MatchingHead;
pub use kim::{position_tensor, sine_position_embedding, KimBlock, MultiHeadAttention};
pub use params::{load_checkpoint, save_checkpoint, Checkpoint, Init, ModelKind, ParamStore};
pub use unfold::{unfold_patches, PatchGeometry};
pub use pomnet::{
    pool_weighted_mean, sum_sq, Branch, FeatureMap, ForwardOutput, KeypointFeatureSet, PomNet, PredictedHeatmaps,
};
