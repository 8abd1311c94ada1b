use priorseg_core::data::{compute_class_prior, generate_synthetic, load_dataset, save_dataset, select_training_subset};
use priorseg_core::metrics::{metrics_csv, MetricsRow};
use priorseg_core::model::{load_checkpoint, save_checkpoint};
use priorseg_core::trainer::{evaluate_checkpoint, fit, initialize_weights};
use priorseg_core::{ArchConfig, RsNet, SynthConfig, TrainConfig, Variant};

fn synth() -> SynthConfig {
    SynthConfig {
        tile_size: 32,
        num_labelled: 8,
        num_unlabelled: 4,
        num_pipes: 4,
        particle_diameter_range: (4.0, 12.0),
        seed: 21,
        ..SynthConfig::default()
    }
}

#[test]
fn train_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&generate_synthetic(&synth()).unwrap(), dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let split = select_training_subset(&data, 1, 0).unwrap();
    assert_eq!((split.labelled.len(), split.held_out.len()), (4, 4));
    let prior = compute_class_prior(&split.masks()).unwrap();

    let mut model = RsNet::<f32>::new(ArchConfig {
        input_size: 32,
        block_depths: vec![4, 4, 8, 8, 8],
        ..ArchConfig::default()
    })
    .unwrap();
    initialize_weights(&mut model, 2);
    let cfg = TrainConfig {
        variant: Variant::Full,
        epochs: 3,
        ..TrainConfig::default()
    };
    let out = fit(&mut model, &split, &prior, &cfg).unwrap();
    assert_eq!(out.history.records.len(), 3);
    assert!(out.history.records.windows(2).all(|w| w[1].lr <= w[0].lr));

    let path = dir.path().join("model.ckpt");
    save_checkpoint(&out.best, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    let row = |m: &RsNet<f32>| {
        let counts = evaluate_checkpoint(m, &split.held_out).unwrap();
        metrics_csv(&[MetricsRow::from_counts("full", "T1", &counts).unwrap()])
    };
    assert_eq!(row(&out.best), row(&loaded));
}
