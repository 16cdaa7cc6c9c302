//! Training loop behavior: schedule, determinism, overfitting, persistence.

use deco_core::checkpoint::Checkpoint;
use deco_core::config::{ModelConfig, RunConfig};
use deco_core::data::{generate_scene, DatasetSpec};
use deco_core::train::{metrics_csv, train_run, Trainer};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        hidden_dim: 16,
        num_queries: 4,
        query_shape: [2, 2],
        decoder_layers: 2,
        sim_kernel: 3,
        cim_kernel: 3,
        backbone_channels: vec![4, 8, 8, 16, 16],
        stage_blocks: [1, 1, 1],
        stage_dims: [16, 16, 16],
        block_kernel: 3,
        ..ModelConfig::toy()
    };
    cfg.train.lr = 1e-3;
    cfg.train.lr_backbone = 1e-3;
    cfg.train.epochs = 3;
    cfg.train.lr_drop_epoch = 2;
    cfg.train.batch_size = 2;
    cfg.data = DatasetSpec {
        count: 6,
        val_count: 2,
        image_size: [64, 64],
        objects: [1, 2],
        size_range: [10, 20],
        ..DatasetSpec::default()
    };
    cfg
}

#[test]
fn lr_drops_tenfold_at_the_configured_epoch() {
    let out = train_run(&tiny(), None, |_| {}).unwrap();
    let lrs: Vec<f64> = out.metrics.iter().map(|m| m.lr).collect();
    assert_eq!(lrs.len(), 3);
    assert_eq!(lrs[0], 1e-3);
    assert_eq!(lrs[1], 1e-3);
    assert!((lrs[2] - 1e-4).abs() < 1e-18);
    assert!(out.metrics.iter().all(|m| m.ap50.is_some()));
}

#[test]
fn same_seed_gives_identical_metrics_and_weights() {
    let a = train_run(&tiny(), None, |_| {}).unwrap();
    let b = train_run(&tiny(), None, |_| {}).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.trainer.checkpoint().encode(), b.trainer.checkpoint().encode());

    let mut other = tiny();
    other.train.seed = 1;
    let c = train_run(&other, None, |_| {}).unwrap();
    assert_ne!(a.trainer.checkpoint().encode(), c.trainer.checkpoint().encode());
}

#[test]
fn overfits_a_single_batch() {
    let mut cfg = tiny();
    cfg.train.overfit_batch = true;
    cfg.data.hflip = false;
    let mut trainer = Trainer::new(&cfg).unwrap();
    let batch: Vec<_> = (0..2).map(|i| generate_scene(&cfg.data, i)).collect();
    let first = trainer.train_step(&batch, 0).unwrap().total;
    let mut last = first;
    for _ in 1..200 {
        last = trainer.train_step(&batch, 0).unwrap().total;
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn checkpoint_roundtrip_preserves_parameters_and_outputs() {
    let out = train_run(&tiny(), None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.deco");
    out.trainer.checkpoint().save(&path).unwrap();

    let (model, store, cfg) = Checkpoint::load(&path).unwrap().restore().unwrap();
    assert_eq!(cfg, out.trainer.config);
    for ((_, a), (_, b)) in out.trainer.store.iter().zip(store.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |p: &deco_core::Parameter<f32>| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{}", a.name);
    }

    let probe = generate_scene(&cfg.data.held_out(), 0).image;
    let before = out.trainer.probe(&probe).unwrap();
    let after = model.predict(&store, deco_core::data::normalize(&probe, cfg.data.mean, cfg.data.std)).unwrap();
    assert_eq!(before.logits.max_abs_diff(&after.logits), Some(0.0));
    assert_eq!(before.boxes.max_abs_diff(&after.boxes), Some(0.0));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let trainer = Trainer::new(&tiny()).unwrap();
    let bytes = trainer.checkpoint().encode();
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let cfg = tiny();
    let full = train_run(&cfg, None, |_| {}).unwrap();

    let mut first = Trainer::new(&cfg).unwrap();
    let m0 = first.run_epoch().unwrap();
    let ck = Checkpoint::decode(&first.checkpoint().encode()).unwrap();
    let mut resumed = Trainer::resume(&ck).unwrap();
    assert_eq!(resumed.epoch, 1);
    let rest: Vec<_> = (1..cfg.train.epochs).map(|_| resumed.run_epoch().unwrap()).collect();

    let mut joined = vec![m0];
    joined.extend(rest);
    assert_eq!(metrics_csv(&joined), metrics_csv(&full.metrics));
    assert_eq!(resumed.checkpoint().encode(), full.trainer.checkpoint().encode());
}
