use hsc_core::data::{synth_scene, HsiCube, SceneSpec};
use hsc_core::trainer::{joint_train, labels_from_bytes, layout, prepare, run_pipeline, BatchMode, TrainConfig};

fn tiny_scene() -> HsiCube {
    synth_scene(&SceneSpec {
        seed: 3,
        width: 12,
        height: 12,
        bands: 8,
        classes: 2,
        subspace_dim: 2,
        noise: 0.01,
    })
    .unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        clusters: 2,
        rank: 2,
        hidden: vec![16, 16],
        patch_edge: 3,
        finch_edge: 3,
        finch_iteration: 1,
        epochs: 6,
        pretrain_epochs: 10,
        pretrain_batch: Some(32),
        kmeans_restarts: 2,
        batch: BatchMode::Mini(48),
        ..TrainConfig::default()
    }
}

#[test]
fn constraint_free_totals_are_reconstruction_plus_dissimilarity() {
    let cube = tiny_scene();
    let cfg = TrainConfig {
        beta1: 0.0,
        beta2: 0.0,
        ..tiny_config()
    };
    let prepared = prepare(&cube, &cfg).unwrap();
    let out = joint_train(&prepared, &cfg, cube.width(), cube.height()).unwrap();
    assert_eq!(out.history.len(), cfg.epochs);
    for rec in &out.history {
        let l = &rec.losses;
        let want = l.reconstruction + cfg.beta * l.dissimilarity;
        assert!((l.total - want).abs() <= 1e-5 * want.abs().max(1.0), "epoch {}: {l:?}", rec.epoch);
    }
}

#[test]
fn every_epoch_total_is_the_weighted_sum_of_its_terms() {
    let cube = tiny_scene();
    let cfg = tiny_config();
    let out = run_pipeline(&cube, &cfg, None).unwrap();
    for rec in &out.history {
        assert!(rec.losses.is_consistent(&cfg, 1e-5), "epoch {}: {:?}", rec.epoch, rec.losses);
        assert!(rec.losses.nonlocal >= -1e-6 && rec.losses.local >= -1e-6);
    }
    assert_eq!(out.labels.len(), cube.masked_labels().len());
    assert!(out.labels.iter().all(|&l| l < cfg.clusters));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cube = tiny_scene();
    let cfg = tiny_config();
    let a = run_pipeline(&cube, &cfg, None).unwrap();
    let b = run_pipeline(&cube, &cfg, None).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint, b.checkpoint);
}

#[test]
fn run_directory_holds_config_metrics_checkpoints_and_labels() {
    let cube = tiny_scene();
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&cube, &cfg, Some(dir.path())).unwrap();
    for f in [layout::CONFIG, layout::METRICS, layout::PRETRAINED, layout::FINAL, layout::MINICLUSTERS, layout::FINCH, layout::MAP] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let mut restored = TrainConfig::default();
    restored.apply_text(&std::fs::read_to_string(dir.path().join(layout::CONFIG)).unwrap()).unwrap();
    // The written configuration is resolved, so the latent width is explicit.
    assert_eq!(restored, TrainConfig { latent: Some(cfg.latent_dim()), ..cfg.clone() });
    let csv = std::fs::read_to_string(dir.path().join(layout::METRICS)).unwrap();
    assert_eq!(csv.lines().count(), cfg.epochs + 1);
    let labels = labels_from_bytes(&std::fs::read(dir.path().join(layout::LABELS)).unwrap()).unwrap();
    let want: Vec<u16> = out.labels.iter().map(|&l| l as u16 + 1).collect();
    assert_eq!(labels, want);
}

#[test]
fn unlabeled_cubes_cannot_be_clustered() {
    let cube = tiny_scene();
    let bare = HsiCube::new(cube.width(), cube.height(), cube.bands(), cube.raster().to_vec(), None).unwrap();
    assert!(run_pipeline(&bare, &tiny_config(), None).is_err());
}

#[test]
fn invalid_configurations_are_rejected_before_training() {
    let cube = tiny_scene();
    for cfg in [
        TrainConfig { window: 4, ..tiny_config() },
        TrainConfig { clusters: 0, ..tiny_config() },
        TrainConfig { lr: -1.0, ..tiny_config() },
    ] {
        assert!(run_pipeline(&cube, &cfg, None).is_err(), "{cfg:?}");
    }
}
