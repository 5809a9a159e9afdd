use transdiff_core::model::ModelConfig;
use transdiff_core::sampler::SamplerConfig;
use transdiff_harness::config::REFERENCE_LR;
use transdiff_harness::train::LOSS_CSV_HEADER;
use transdiff_harness::{Checkpoint, DataConfig, Phase, RunConfig, TrainConfig, Trainer};

fn tiny(steps: u64) -> RunConfig {
    RunConfig {
        model: ModelConfig::micro(),
        data: DataConfig {
            train_per_class: 16,
            ..Default::default()
        },
        train: TrainConfig {
            steps,
            batch_size: 4,
            log_every: 0,
            seed: 11,
            ..Default::default()
        },
        sampler: SamplerConfig::default(),
    }
}

#[test]
fn toml_round_trip_and_defaults() {
    let cfg = tiny(7);
    let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);

    let empty = RunConfig::from_toml("").unwrap();
    assert_eq!(empty.train.steps, TrainConfig::default().steps);
    assert!(RunConfig::from_toml("[train]\nnot_a_key = 1\n").is_err());
}

#[test]
fn default_lr_scales_with_sqrt_batch() {
    let t = TrainConfig {
        batch_size: 2048 / 4,
        ..Default::default()
    };
    assert!((t.effective_lr() - REFERENCE_LR / 2.0).abs() < 1e-12);
    let ft = t.finetune();
    assert_eq!(ft.phase, Phase::FinetuneMrar);
    assert_eq!(ft.steps, t.steps / 20);
}

#[test]
fn zero_steps_checkpoint_matches_init() {
    let mut tr = Trainer::new(tiny(0)).unwrap();
    let init = tr.checkpoint();
    let ck = tr.run(None, |_| {}).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.params, init.params);
    assert_eq!(ck.params, ck.ema);
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(tiny(3)).unwrap();
    let ck = tr.run(Some(dir.path()), |_| {}).unwrap();
    let path = tr.checkpoint_path(dir.path());
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.step, 3);

    let csv = std::fs::read_to_string(dir.path().join("pretrain-1step-loss.csv")).unwrap();
    assert!(csv.starts_with(LOSS_CSV_HEADER));
    assert_eq!(csv.lines().count(), 4);

    let mut bytes = ck.to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    assert!(Checkpoint::from_bytes(b"nope").is_err());
}

#[test]
fn finetune_starts_from_ema_weights() {
    let mut tr = Trainer::new(tiny(4)).unwrap();
    let pre = tr.run(None, |_| {}).unwrap();
    let ft = Trainer::finetune_from(&pre, pre.config.train.finetune()).unwrap();
    let ck = ft.checkpoint();
    assert_eq!(ck.phase, Phase::FinetuneMrar);
    assert_eq!(ck.step, 0);
    assert_eq!(ck.params, pre.ema);
}
