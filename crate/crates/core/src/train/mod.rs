//! Episodic training: heatmap supervision, Adam with a step schedule,
//! per-epoch checkpoints and a newline-delimited JSON metric log.

mod adam;
mod loss;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, EpisodeSampler, ImageStore, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::eval::{evaluate, KeypointPredictor, PckConfig};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelKind, ParamStore, PomNet, PreparedEpisode};
use crate::rng::{derive_seed, rng_for};

pub use adam::{Adam, AdamConfig};
pub use loss::{heatmap_loss, heatmap_targets, mse_loss, BatchLoss, LossReport};

const STREAM_INIT: u64 = 0x1417;
const STREAM_EPISODES: u64 = 0xe915;
const STREAM_VAL: u64 = 0x7a1;

pub const METRICS_FILE: &str = "metrics.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    #[serde(rename = "K")]
    pub shots: usize,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Validate every this many epochs; 0 disables validation.
    #[serde(default)]
    pub val_every: usize,
    #[serde(default = "default_val_episodes")]
    pub val_episodes: usize,
    #[serde(default = "default_sigma")]
    pub val_sigma: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_true() -> bool {
    true
}

fn default_val_episodes() -> usize {
    20
}

fn default_sigma() -> f64 {
    0.2
}

impl TrainConfig {
    /// 40 epochs of 500 episodes, batch 8, decay at 30 and 36.
    pub fn desk() -> Self {
        Self {
            epochs: 40,
            episodes_per_epoch: 500,
            batch_size: 8,
            base_lr: 3e-4,
            lr_decay_epochs: vec![30, 36],
            lr_decay_factor: 0.1,
            shots: 1,
            seed: 0,
            checkpoint_dir: None,
            augment: true,
            val_every: 5,
            val_episodes: default_val_episodes(),
            val_sigma: 0.2,
            adam: AdamConfig::default(),
        }
    }

    /// Long schedule: 210 epochs with decay at 170 and 200.
    pub fn full() -> Self {
        Self {
            epochs: 210,
            episodes_per_epoch: 10_000,
            batch_size: 16,
            base_lr: 1e-3,
            lr_decay_epochs: vec![170, 200],
            val_every: 10,
            val_episodes: 100,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown training preset {other:?} (desk, full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 || self.batch_size == 0 || self.shots == 0 {
            return Err(Error::Config("epochs, episodes_per_epoch, batch_size and K must be positive".into()));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lr_decay_epochs must be strictly increasing".into()));
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::Config("lr_decay_epochs must be below epochs".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch.div_ceil(self.batch_size)
    }

    /// Learning rate during 0-based `epoch`: the base rate times the decay
    /// factor once per decay epoch already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.base_lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_pck: Option<f64>,
}

pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// A model the episodic trainer can optimize.
pub trait EpisodicModel: KeypointPredictor + Sized {
    fn kind() -> ModelKind;
    fn build(config: &ModelConfig, store: &mut ParamStore) -> Result<Self>;
    fn model_config(&self) -> &ModelConfig;
    /// Differentiable loss over a batch; `None` when nothing is supervised.
    fn batch_loss(&self, episodes: &[PreparedEpisode]) -> Result<Option<BatchLoss>>;
    /// Whether an episode carries any training signal for this model.
    fn usable(episode: &PreparedEpisode) -> bool {
        let q = episode.query.labeled();
        (0..q.len()).any(|j| q[j] && episode.supports.iter().any(|s| s.visibility[j].is_labeled()))
    }
}

impl EpisodicModel for PomNet {
    fn kind() -> ModelKind {
        ModelKind::PomNet
    }

    fn build(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        PomNet::new(config, store)
    }

    fn model_config(&self) -> &ModelConfig {
        self.config()
    }

    fn batch_loss(&self, episodes: &[PreparedEpisode]) -> Result<Option<BatchLoss>> {
        let batch = crate::model::EpisodeBatch::new(episodes, self.config(), self.dtype())?;
        let out = self.forward(&batch)?;
        let queries: Vec<_> = episodes.iter().map(|e| &e.query).collect();
        heatmap_loss(&out, &queries, self.config().gaussian())
    }
}

/// Everything the trainer reads.
#[derive(Clone, Copy)]
pub struct TrainingData<'a> {
    pub instances: &'a [InstanceAnnotation],
    pub images: &'a ImageStore,
    pub split: &'a DatasetSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_pck: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

pub struct Trainer<'a, M: EpisodicModel> {
    data: TrainingData<'a>,
    config: TrainConfig,
    store: ParamStore,
    model: M,
    adam: Adam,
    train_categories: Vec<u32>,
    epoch: usize,
    step: usize,
    log: Vec<LogRecord>,
}

fn check_data(data: &TrainingData<'_>, config: &TrainConfig) -> Result<Vec<u32>> {
    config.validate()?;
    data.split.validate()?;
    if data.split.train.is_empty() {
        return Err(Error::Config("split has no training categories".into()));
    }
    let sampler = EpisodeSampler::new(data.instances);
    for &c in &data.split.train {
        let available = sampler.available(c);
        if available < config.shots + 1 {
            return Err(Error::Sampling {
                category: c,
                available,
                needed: config.shots + 1,
            });
        }
    }
    Ok(data.split.train.iter().copied().collect())
}

impl<'a, M: EpisodicModel> Trainer<'a, M> {
    /// Fresh model initialized from the training seed.
    pub fn new(data: TrainingData<'a>, model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        let train_categories = check_data(&data, &config)?;
        let mut store = ParamStore::new(DType::F32, derive_seed(config.seed, &[STREAM_INIT]));
        let model = M::build(model_config, &mut store)?;
        let adam = Adam::new(config.adam);
        Ok(Self {
            data,
            config,
            store,
            model,
            adam,
            train_categories,
            epoch: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`]. The metric
    /// log in the checkpoint directory, if any, is truncated to the records
    /// the checkpoint had seen.
    pub fn resume(data: TrainingData<'a>, config: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let train_categories = check_data(&data, &config)?;
        let mut ckpt = load_checkpoint(path.as_ref())?;
        if ckpt.kind != M::kind() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, expected {}",
                ckpt.kind.as_str(),
                M::kind().as_str()
            )));
        }
        let meta = |k: &str| -> Result<usize> {
            ckpt.metadata
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks training metadata {k:?}")))
        };
        let epoch = meta("epoch")?;
        let step = meta("step")?;
        let adam_steps = meta("optimizer_steps")? as u64;
        let optim = ckpt.take_prefixed("optim");
        let adam = Adam::from_state(config.adam, adam_steps, optim)?;
        let mut store = ParamStore::from_tensors(std::mem::take(&mut ckpt.tensors))?;
        let model = M::build(&ckpt.config, &mut store)?;
        let mut log = Vec::new();
        if let Some(dir) = &config.checkpoint_dir {
            let path = dir.join(METRICS_FILE);
            if path.exists() {
                log = read_metric_log(&path)?;
                log.retain(|r| r.step < step);
                let mut text = String::new();
                for r in &log {
                    text.push_str(&serde_json::to_string(r)?);
                    text.push('\n');
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(Self {
            data,
            config,
            store,
            model,
            adam,
            train_categories,
            epoch,
            step,
            log,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Epochs completed.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Optimizer steps completed.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn into_parts(self) -> (M, ParamStore, Vec<LogRecord>) {
        (self.model, self.store, self.log)
    }

    /// The episodes of global step `step`. Each slot redraws (with a fresh
    /// seed) until it finds an episode with training signal.
    pub fn episodes_for_step(&self, step: usize) -> Result<Vec<PreparedEpisode>> {
        let sampler = EpisodeSampler::new(self.data.instances);
        let preprocess = self.model.model_config().preprocess();
        let mut out = Vec::with_capacity(self.config.batch_size);
        for slot in 0..self.config.batch_size {
            let mut found = None;
            for attempt in 0..32u64 {
                let seed = derive_seed(self.config.seed, &[STREAM_EPISODES, step as u64, slot as u64, attempt]);
                let mut rng = rng_for(seed, &[]);
                let category = self.train_categories[rng.random_range(0..self.train_categories.len())];
                let episode = sampler.sample(category, self.config.shots, seed)?;
                let prepared = PreparedEpisode::prepare(&episode, self.data.images, &preprocess, self.config.augment, seed)?;
                if M::usable(&prepared) {
                    found = Some(prepared);
                    break;
                }
            }
            out.push(found.ok_or_else(|| {
                Error::Contract(format!("no usable episode for step {step} slot {slot} after 32 draws"))
            })?);
        }
        Ok(out)
    }

    fn train_step(&mut self, lr: f64) -> Result<Option<f64>> {
        let episodes = self.episodes_for_step(self.step)?;
        let Some(loss) = self.model.batch_loss(&episodes)? else {
            return Ok(None);
        };
        if !loss.value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                loss: loss.value,
                episodes: episodes.iter().map(PreparedEpisode::describe).collect(),
            });
        }
        let grads = loss.loss.backward()?;
        self.adam.step(&self.store, &grads, lr)?;
        Ok(Some(loss.value))
    }

    fn append_log(&self, records: &[LogRecord]) -> Result<()> {
        let Some(dir) = &self.config.checkpoint_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for r in records {
            writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// PCK of the current model on the validation categories.
    pub fn validate(&self) -> Result<Option<f64>> {
        let val: &BTreeSet<u32> = &self.data.split.val;
        if val.is_empty() || self.config.val_episodes == 0 {
            return Ok(None);
        }
        let cfg = PckConfig::new(
            self.config.val_sigma,
            self.config.val_episodes,
            self.config.shots,
            derive_seed(self.config.seed, &[STREAM_VAL]),
        );
        Ok(Some(evaluate(&self.model, self.data.instances, self.data.images, val, &cfg)?.mean))
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let steps = self.config.steps_per_epoch();
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            if let Some(loss) = self.train_step(lr)? {
                records.push(LogRecord {
                    step: self.step,
                    epoch,
                    loss,
                    lr,
                    val_pck: None,
                });
            }
            self.step += 1;
        }
        self.epoch += 1;
        let val_pck = if self.config.val_every > 0 && self.epoch % self.config.val_every == 0 {
            self.validate()?
        } else {
            None
        };
        if let Some(last) = records.last_mut() {
            last.val_pck = val_pck;
        }
        let mean_loss = records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64;
        self.append_log(&records)?;
        self.log.extend(records);
        let checkpoint = match &self.config.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("epoch_{:04}.safetensors", self.epoch));
                self.save(&path)?;
                Some(path)
            }
            None => None,
        };
        Ok(EpochSummary {
            epoch,
            mean_loss,
            val_pck,
            checkpoint,
        })
    }

    /// Trains until the configured number of epochs is complete.
    pub fn run(&mut self) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while self.epoch < self.config.epochs {
            out.push(self.run_epoch()?);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.store.tensors();
        for (k, t) in self.adam.state_tensors() {
            tensors.insert(format!("optim.{k}"), t);
        }
        let mut metadata = std::collections::BTreeMap::new();
        metadata.insert("epoch".to_string(), self.epoch.to_string());
        metadata.insert("step".to_string(), self.step.to_string());
        metadata.insert("optimizer_steps".to_string(), self.adam.steps_taken().to_string());
        metadata.insert("train_config".to_string(), serde_json::to_string(&self.config)?);
        Ok(Checkpoint {
            kind: M::kind(),
            config: self.model.model_config().clone(),
            tensors,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.checkpoint()?)
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train<M: EpisodicModel>(
    data: TrainingData<'_>,
    model_config: &ModelConfig,
    config: TrainConfig,
) -> Result<(M, ParamStore, Vec<LogRecord>)> {
    let mut trainer = Trainer::<M>::new(data, model_config, config)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}

/// Loads a model of type `M` for inference; optimizer state is dropped.
pub fn load_model<M: EpisodicModel>(path: impl AsRef<Path>) -> Result<(M, ParamStore)> {
    let mut ckpt = load_checkpoint(path)?;
    if ckpt.kind != M::kind() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} model, expected {}",
            ckpt.kind.as_str(),
            M::kind().as_str()
        )));
    }
    ckpt.take_prefixed("optim");
    let mut store = ParamStore::from_tensors(std::mem::take(&mut ckpt.tensors))?;
    let model = M::build(&ckpt.config, &mut store)?;
    Ok((model, store))
}

/// Most recent `epoch_*.safetensors` in a checkpoint directory.
pub fn latest_checkpoint(dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    let dir = dir.as_ref();
    let mut best = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("epoch_") && name.ends_with(".safetensors") && best.as_ref().is_none_or(|b: &PathBuf| path > *b) {
            best = Some(path);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down_at_decay_epochs() {
        let cfg = TrainConfig::full();
        let lrs: Vec<f64> = [0, 169, 170, 199, 200, 209].iter().map(|&e| cfg.lr_at(e)).collect();
        let expect = [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15 * b.max(1e-3) * 10.0, "{lrs:?}");
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::full().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.lr_decay_epochs = vec![36, 30];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.lr_decay_epochs = vec![30, 40];
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_uses_k() {
        let json = serde_json::to_value(TrainConfig::desk()).unwrap();
        assert_eq!(json["K"], 1);
        let back: TrainConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, TrainConfig::desk());
    }
}
