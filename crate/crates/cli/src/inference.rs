//! Single-episode inference from in-memory images, shared by `predict` and
//! the HTTP service. Boxes default to the whole image.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use pomnet::data::{BBox, Episode, ImageRef, ImageStore, InstanceAnnotation, Keypoint, ProcessedSample, Visibility};
use pomnet::eval::KeypointPredictor;
use pomnet::heatmap::Peak;
use pomnet::model::{load_checkpoint, ModelKind, PreparedEpisode};
use pomnet::train::load_model;
use pomnet::{PomNet, ProtoNet};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub enum LoadedModel {
    PomNet(PomNet),
    ProtoNet(ProtoNet),
}

pub struct InferenceModel {
    model: LoadedModel,
    model_id: String,
}

/// One support image with its keypoints in original pixels.
#[derive(Debug, Clone)]
pub struct SupportExample {
    pub image: Arc<RgbImage>,
    pub keypoints: Vec<Keypoint>,
    /// Crop box; the whole image when absent.
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictedKeypoint {
    /// `None` when no support labels this keypoint.
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub keypoints: Vec<PredictedKeypoint>,
    /// Decoded peaks in heatmap coordinates.
    pub peaks: Vec<Option<Peak>>,
    pub query: ProcessedSample,
}

impl InferenceModel {
    /// Loads a checkpoint; the model id is derived from the file contents.
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        let kind = load_checkpoint(path)?.kind;
        let model = match kind {
            ModelKind::PomNet => LoadedModel::PomNet(load_model::<PomNet>(path)?.0),
            ModelKind::ProtoNet => LoadedModel::ProtoNet(load_model::<ProtoNet>(path)?.0),
        };
        Ok(Self {
            model,
            model_id: format!("{}-{}", kind.as_str(), &digest[..12]),
        })
    }

    pub fn new(model: LoadedModel, model_id: impl Into<String>) -> Self {
        Self {
            model,
            model_id: model_id.into(),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn predictor(&self) -> &dyn KeypointPredictor {
        match &self.model {
            LoadedModel::PomNet(m) => m,
            LoadedModel::ProtoNet(m) => m,
        }
    }

    /// Largest keypoint count the model accepts.
    pub fn max_keypoints(&self) -> Option<usize> {
        match &self.model {
            LoadedModel::PomNet(m) => Some(m.config().slot_count),
            LoadedModel::ProtoNet(_) => None,
        }
    }

    pub fn predict(&self, supports: &[SupportExample], query: Arc<RgbImage>, query_bbox: Option<BBox>) -> pomnet::Result<Prediction> {
        let j = supports.first().map_or(0, |s| s.keypoints.len());
        let instance = |id: u64, image: Arc<RgbImage>, keypoints: Vec<Keypoint>, bbox: Option<BBox>| InstanceAnnotation {
            id,
            image_size: image.dimensions(),
            bbox: bbox.unwrap_or_else(|| BBox::full_image(image.width(), image.height())),
            image: ImageRef::Memory(image),
            category_id: 0,
            keypoints,
        };
        let episode = Episode {
            category_id: 0,
            supports: supports
                .iter()
                .enumerate()
                .map(|(i, s)| instance(i as u64 + 1, s.image.clone(), s.keypoints.clone(), s.bbox))
                .collect(),
            query: instance(0, query, vec![Keypoint::new(0.0, 0.0, Visibility::Unlabeled); j], query_bbox),
        };
        let predictor = self.predictor();
        let prepared = PreparedEpisode::prepare(&episode, &ImageStore::new(), &predictor.preprocess_config(), false, 0)?;
        let peaks = predictor.predict_keypoints(&prepared)?;
        let keypoints = peaks
            .iter()
            .map(|p| match p {
                Some(p) => {
                    let (x, y) = prepared.query.heatmap_to_pixels(p.x, p.y);
                    PredictedKeypoint {
                        x: Some(x),
                        y: Some(y),
                        confidence: p.confidence.clamp(0.0, 1.0),
                    }
                }
                None => PredictedKeypoint {
                    x: None,
                    y: None,
                    confidence: 0.0,
                },
            })
            .collect();
        Ok(Prediction {
            keypoints,
            peaks,
            query: prepared.query,
        })
    }
}
