use ampose_core::data::{load_dataset, synth_dataset, Dataset};
use ampose_core::metrics::{evaluate, EvalOptions};
use ampose_core::model::{build_model, ModelConfig, SkeletonSource};
use ampose_core::skeleton::Skeleton;
use ampose_core::training::{
    dataset_mpjpe, load_checkpoint, predict_dataset, save_checkpoint, train, TrainConfig, Trainer,
};

fn tiny_setup() -> (ModelConfig, Dataset) {
    let cfg = ModelConfig {
        channels: 16,
        depth: 1,
        num_heads: 2,
        ..ModelConfig::default()
    };
    let skel = Skeleton::builtin("h36m17").unwrap();
    (cfg, synth_dataset(3, 24, &skel).unwrap())
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        micro_batch: 4,
        lr0: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn synth_train_save_load_predict() {
    let (cfg, data) = tiny_setup();
    let model = build_model(&cfg, 5).unwrap();
    let before = dataset_mpjpe(&model, &data).unwrap();
    let (ckpt, logs) = train(model, &data, &train_cfg()).unwrap();
    assert_eq!(logs.len(), 3);
    assert_eq!(ckpt.progress.step, 9);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let restored = load_checkpoint(&path).unwrap().model().unwrap();
    let trained = ckpt.model().unwrap();
    let a = predict_dataset(&trained, &data).unwrap();
    let b = predict_dataset(&restored, &data).unwrap();
    assert_eq!(a, b);

    let after = dataset_mpjpe(&restored, &data).unwrap();
    assert!(after.is_finite() && after < before, "{before} -> {after}");

    let gts: Vec<_> = data.samples.iter().map(|s| s.pose3d.clone()).collect();
    let report = evaluate(&b, &gts, None, &EvalOptions::default()).unwrap();
    assert!((report.mpjpe_mm - after).abs() < 1e-9);
    assert_eq!(report.n_samples, data.len());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (cfg, data) = tiny_setup();
    let full = train(build_model(&cfg, 5).unwrap(), &data, &train_cfg())
        .unwrap()
        .0;

    let mut first = Trainer::new(build_model(&cfg, 5).unwrap(), train_cfg()).unwrap();
    for _ in 0..2 {
        first.step(&data).unwrap();
    }
    let bytes = first.checkpoint().to_bytes(Default::default()).unwrap();
    let ckpt = ampose_core::training::Checkpoint::from_bytes(&bytes).unwrap();
    let mut second = Trainer::resume(&ckpt).unwrap();
    second.run(&data, None, |_, _| Ok(())).unwrap();
    assert_eq!(
        second.checkpoint().to_bytes(Default::default()).unwrap(),
        full.to_bytes(Default::default()).unwrap()
    );
}

#[test]
fn dataset_files_round_trip() {
    let (_, data) = tiny_setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    data.save(&path).unwrap();
    let back = load_dataset(&path, &data.skeleton).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in back.samples.iter().zip(&data.samples) {
        assert_eq!(a.pose2d, b.pose2d);
        assert_eq!(a.pose3d, b.pose3d);
    }
}

#[test]
fn inline_and_named_skeletons_build_the_same_model() {
    let (cfg, data) = tiny_setup();
    let inline = ModelConfig {
        skeleton: SkeletonSource::Inline(Skeleton::builtin("h36m17").unwrap()),
        ..cfg.clone()
    };
    let a = build_model(&cfg, 9).unwrap();
    let b = build_model(&inline, 9).unwrap();
    assert_eq!(
        predict_dataset(&a, &data).unwrap(),
        predict_dataset(&b, &data).unwrap()
    );
}
