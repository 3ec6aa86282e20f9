use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use pomnet::data::synthetic::{ANNOTATION_FILE, SPLIT_FILE};
use pomnet::data::{
    generate_synthetic, load_annotations, BBox, DatasetSplit, ImageStore, InstanceAnnotation, ShapeFamily, SplitRole,
    SynthConfig,
};
use pomnet::eval::{evaluate, KeypointPredictor, OraclePredictor, PckConfig, PckResult, UniformPredictor};
use pomnet::model::{ModelConfig, ModelKind};
use pomnet::train::{EpisodicModel, TrainConfig, Trainer, TrainingData};
use pomnet::{PomNet, ProtoNet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::inference::{InferenceModel, SupportExample};

pub struct SynthArgs {
    pub families: Vec<ShapeFamily>,
    pub val_families: Vec<ShapeFamily>,
    pub test_families: Vec<ShapeFamily>,
    pub instances: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub image_size: u32,
    pub max_shots: usize,
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<Value> {
    let roles = [
        (&args.families, SplitRole::Train),
        (&args.val_families, SplitRole::Val),
        (&args.test_families, SplitRole::Test),
    ];
    let families: Vec<_> = roles
        .iter()
        .flat_map(|(fams, role)| fams.iter().map(move |&f| (f, args.instances, *role)))
        .collect();
    let mut config = SynthConfig::with_families(families);
    config.image_size = args.image_size;
    config.max_shots = args.max_shots;
    let data = generate_synthetic(&config, &args.out, args.seed)?;
    Ok(json!({
        "annotations": args.out.join(ANNOTATION_FILE),
        "split": args.out.join(SPLIT_FILE),
        "categories": data.categories.len(),
        "instances": data.instances.len(),
    }))
}

/// Training run description. `model` and `train` are a preset name or an
/// object; an object may name a `preset` and override some of its fields.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub model: Value,
    #[serde(default = "default_train")]
    pub train: Value,
}

fn default_kind() -> String {
    "pomnet".into()
}

fn default_train() -> Value {
    Value::String("desk".into())
}

fn with_preset<T: Serialize + DeserializeOwned>(value: &Value, preset: impl Fn(&str) -> pomnet::Result<T>) -> anyhow::Result<T> {
    match value {
        Value::String(name) => Ok(preset(name)?),
        Value::Object(fields) => {
            let mut merged = match fields.get("preset") {
                Some(Value::String(name)) => serde_json::to_value(preset(name)?)?,
                Some(other) => bail!("preset must be a name, got {other}"),
                None => Value::Object(Default::default()),
            };
            let target = merged.as_object_mut().expect("presets serialize to objects");
            for (k, v) in fields.iter().filter(|(k, _)| k.as_str() != "preset") {
                target.insert(k.clone(), v.clone());
            }
            Ok(serde_json::from_value(merged)?)
        }
        other => bail!("expected a preset name or an object, got {other}"),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid run config {}", path.display()))
    }

    pub fn resolve(&self) -> anyhow::Result<(ModelKind, ModelConfig, TrainConfig)> {
        let kind = ModelKind::parse(&self.kind)?;
        let model = with_preset(&self.model, ModelConfig::preset).context("model config")?;
        let train = with_preset(&self.train, TrainConfig::preset).context("train config")?;
        model.validate()?;
        train.validate()?;
        Ok((kind, model, train))
    }
}

/// Annotation file of a dataset directory, or the path itself if it is a file.
fn annotation_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(ANNOTATION_FILE)
    } else {
        data.to_path_buf()
    }
}

fn default_split(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(SPLIT_FILE)
    } else {
        data.with_file_name(SPLIT_FILE)
    }
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub split: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
}

pub fn train(args: &TrainArgs) -> anyhow::Result<Value> {
    let (kind, model, mut train) = RunConfig::load(&args.config)?.resolve()?;
    train.seed = args.seed;
    train.checkpoint_dir = Some(args.out.clone());
    let (_, instances) = load_annotations(annotation_path(&args.data))?;
    let split = DatasetSplit::load(args.split.clone().unwrap_or_else(|| default_split(&args.data)))?;
    let images = ImageStore::new();
    let data = TrainingData {
        instances: &instances,
        images: &images,
        split: &split,
    };
    match kind {
        ModelKind::PomNet => run_training::<PomNet>(data, &model, train, args.resume.as_deref()),
        ModelKind::ProtoNet => run_training::<ProtoNet>(data, &model, train, args.resume.as_deref()),
    }
}

fn run_training<M: EpisodicModel>(
    data: TrainingData<'_>,
    model: &ModelConfig,
    train: TrainConfig,
    resume: Option<&Path>,
) -> anyhow::Result<Value> {
    let mut trainer = match resume {
        Some(path) => Trainer::<M>::resume(data, train, path)?,
        None => Trainer::<M>::new(data, model, train)?,
    };
    let epochs = trainer.config().epochs;
    let mut last = None;
    while trainer.epoch() < epochs {
        let summary = trainer.run_epoch()?;
        eprintln!(
            "epoch {}/{} loss {:.6}{}",
            summary.epoch + 1,
            epochs,
            summary.mean_loss,
            summary.val_pck.map(|p| format!(" val PCK {p:.4}")).unwrap_or_default()
        );
        last = Some(summary);
    }
    Ok(json!({
        "epochs": trainer.epoch(),
        "steps": trainer.step(),
        "final_loss": last.as_ref().map(|s| s.mean_loss),
        "checkpoint": last.and_then(|s| s.checkpoint),
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorChoice {
    Model,
    Oracle,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: PathBuf,
    pub splits: Vec<PathBuf>,
    pub role: Role,
    pub sigma: f64,
    pub episodes: usize,
    pub shots: usize,
    pub seed: u64,
    pub predictor: PredictorChoice,
}

/// One result per split file; several splits also report their mean.
pub fn eval(args: &EvalArgs) -> anyhow::Result<Value> {
    let (_, instances) = load_annotations(annotation_path(&args.data))?;
    let loaded = args.checkpoint.as_ref().map(InferenceModel::load).transpose()?;
    let preprocess = match &loaded {
        Some(m) => m.predictor().preprocess_config(),
        None => ModelConfig::tiny().preprocess(),
    };
    let oracle = OraclePredictor { preprocess };
    let uniform = UniformPredictor {
        preprocess,
        seed: args.seed,
    };
    let predictor: &dyn KeypointPredictor = match args.predictor {
        PredictorChoice::Model => loaded
            .as_ref()
            .map(|m| m.predictor())
            .ok_or_else(|| anyhow::anyhow!("--checkpoint is required for the model predictor"))?,
        PredictorChoice::Oracle => &oracle,
        PredictorChoice::Uniform => &uniform,
    };
    let splits = if args.splits.is_empty() {
        vec![default_split(&args.data)]
    } else {
        args.splits.clone()
    };
    let config = PckConfig::new(args.sigma, args.episodes, args.shots, args.seed);
    let images = ImageStore::new();
    let mut results: Vec<PckResult> = Vec::new();
    for path in &splits {
        let split = DatasetSplit::load(path)?;
        let categories: &BTreeSet<u32> = match args.role {
            Role::Train => &split.train,
            Role::Val => &split.val,
            Role::Test => &split.test,
        };
        if categories.is_empty() {
            bail!("split {} has no categories in the requested role", path.display());
        }
        results.push(evaluate(predictor, &instances, &images, categories, &config)?);
    }
    if results.len() == 1 {
        return Ok(serde_json::to_value(results.remove(0))?);
    }
    let mean = results.iter().map(|r| r.mean).sum::<f64>() / results.len() as f64;
    Ok(json!({"splits": results, "mean": mean}))
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub support: PathBuf,
    pub query: PathBuf,
    pub query_bbox: Option<BBox>,
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<Value> {
    let model = InferenceModel::load(&args.checkpoint)?;
    let (categories, supports) = load_annotations(&args.support)?;
    let Some(first) = supports.first() else {
        bail!("{} holds no support annotations", args.support.display());
    };
    if supports.iter().any(|s| s.category_id != first.category_id) {
        bail!("support annotations must share one category");
    }
    let category = categories
        .iter()
        .find(|c| c.id == first.category_id)
        .expect("annotations reference declared categories");
    let images = ImageStore::new();
    let examples = supports
        .iter()
        .map(|s: &InstanceAnnotation| {
            Ok(SupportExample {
                image: images.get(&s.image)?,
                keypoints: s.keypoints.clone(),
                bbox: Some(s.bbox),
            })
        })
        .collect::<pomnet::Result<Vec<_>>>()?;
    let query = image::open(&args.query)
        .with_context(|| format!("cannot read query image {}", args.query.display()))?
        .to_rgb8();
    let prediction = model.predict(&examples, Arc::new(query), args.query_bbox)?;
    let keypoints: Vec<Value> = prediction
        .keypoints
        .iter()
        .zip(&category.keypoint_names)
        .map(|(k, name)| json!({"name": name, "x": k.x, "y": k.y, "confidence": k.confidence}))
        .collect();
    Ok(json!({
        "model_id": model.model_id(),
        "category": category.name,
        "query": args.query,
        "keypoints": keypoints,
    }))
}
