use pomnet::data::{render_synthetic, ImageStore, ShapeFamily, SplitRole, SynthConfig, SynthDataset};
use pomnet::model::ModelConfig;
use pomnet::train::{read_metric_log, TrainConfig, Trainer, TrainingData, METRICS_FILE};
use pomnet::{PomNet, ProtoNet};

fn dataset(instances: usize) -> SynthDataset {
    let families = [
        (ShapeFamily::Triangle, instances, SplitRole::Train),
        (ShapeFamily::Square, instances, SplitRole::Train),
        (ShapeFamily::Hexagon, instances, SplitRole::Train),
        (ShapeFamily::Pentagon, 8, SplitRole::Test),
    ];
    render_synthetic(&SynthConfig::with_families(families), 3).unwrap()
}

fn config(epochs: usize, episodes: usize) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.epochs = epochs;
    c.episodes_per_epoch = episodes;
    c.lr_decay_epochs = vec![];
    c.val_every = 0;
    c
}

#[test]
fn loss_falls_within_500_steps() {
    let data = dataset(40);
    let images = ImageStore::new();
    let td = TrainingData { instances: &data.instances, images: &images, split: &data.split };
    let cfg = config(1, 500 * 8);
    let mut trainer = Trainer::<PomNet>::new(td, &ModelConfig::tiny(), cfg).unwrap();
    trainer.run_epoch().unwrap();
    let losses: Vec<f64> = trainer.log().iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 500);
    let first: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = losses[450..].iter().sum::<f64>() / 50.0;
    assert!(last < 0.25 * first, "first {first} last {last}");
}

#[test]
fn resume_is_bit_exact() {
    let data = dataset(12);
    let images = ImageStore::new();
    let split = data.split.clone();
    let straight_dir = tempfile::tempdir().unwrap();
    let resumed_dir = tempfile::tempdir().unwrap();
    let mut cfg = config(2, 24);
    cfg.lr_decay_epochs = vec![1];

    cfg.checkpoint_dir = Some(straight_dir.path().to_path_buf());
    let td = TrainingData { instances: &data.instances, images: &images, split: &split };
    let mut straight = Trainer::<PomNet>::new(td, &ModelConfig::tiny(), cfg.clone()).unwrap();
    straight.run().unwrap();

    cfg.checkpoint_dir = Some(resumed_dir.path().to_path_buf());
    let td = TrainingData { instances: &data.instances, images: &images, split: &split };
    let mut first = Trainer::<PomNet>::new(td, &ModelConfig::tiny(), cfg.clone()).unwrap();
    first.run_epoch().unwrap();
    let ckpt = resumed_dir.path().join("epoch_0001.safetensors");
    assert!(ckpt.exists());
    let td = TrainingData { instances: &data.instances, images: &images, split: &split };
    let mut resumed = Trainer::<PomNet>::resume(td, cfg, &ckpt).unwrap();
    assert_eq!(resumed.epoch(), 1);
    resumed.run().unwrap();

    for (name, var) in straight.store().vars() {
        let a = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = resumed.store().get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} differs");
    }
    let a = read_metric_log(straight_dir.path().join(METRICS_FILE)).unwrap();
    let b = read_metric_log(resumed_dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn baseline_trains_and_checkpoints() {
    let data = dataset(12);
    let images = ImageStore::new();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(1, 16);
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let td = TrainingData { instances: &data.instances, images: &images, split: &data.split };
    let mut trainer = Trainer::<ProtoNet>::new(td, &ModelConfig::tiny(), cfg).unwrap();
    let summary = trainer.run_epoch().unwrap();
    assert!(summary.mean_loss.is_finite());
    let (loaded, _) = pomnet::train::load_model::<ProtoNet>(summary.checkpoint.unwrap()).unwrap();
    assert_eq!(loaded.grid_size(), 8);
}
