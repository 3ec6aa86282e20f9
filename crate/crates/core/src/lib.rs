//! Category-agnostic pose estimation by keypoint matching.
//!
//! Given K annotated support images that define the keypoints of an
//! arbitrary category, the network predicts those keypoints on a query image
//! of the same category. The crate covers the whole loop: annotations and
//! episodic sampling ([`data`]), target heatmaps ([`heatmap`]), the network
//! ([`model`]), episodic training ([`train`]), PCK evaluation ([`eval`]) and a
//! prototype-matching baseline ([`baseline`]).

pub mod baseline;
pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use heatmap::{GaussianSpec, HeatmapStack, Peak};
pub use baseline::ProtoNet;
pub use model::{ModelConfig, PomNet};
