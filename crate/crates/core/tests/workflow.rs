//! End-to-end use of the public API on small synthetic data.

use latentcast::autoencoder::{Autoencoder, AutoencoderConfig};
use latentcast::dataio::{split_sequences, Dataset, Frame};
use latentcast::experiment::{
    dataset_reconstruction_mse, dataset_to_maps, extract_latents, kfold_partition,
    search_predictors, select_best, SeqGrid,
};
use latentcast::nn::{LossKind, OptimizerKind, SampleSource, Schedule};
use latentcast::preprocess::{preprocess_dataset, verify_continuity, PreprocessSpec};
use latentcast::seqmodels::{window_count, SeqModel, SeqModelConfig, SeqModelKind, WindowSet};
use latentcast::synth;

fn frames(ds: &Dataset) -> Vec<Frame> {
    ds.sequences
        .iter()
        .flat_map(|s| s.frames.iter().cloned())
        .collect()
}

#[test]
fn raw_data_survives_save_preprocess_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth::color_actions(6, 12, 48, 3, 1);
    let path = dir.path().join("raw.npy");
    raw.save(&path).unwrap();
    let loaded = Dataset::load(&path).unwrap();
    assert_eq!(loaded, raw);

    let spec = PreprocessSpec {
        target_length: 10,
        target_size: (32, 32),
        ..PreprocessSpec::default()
    };
    let (pp, summary) = preprocess_dataset(&loaded, &spec).unwrap();
    assert_eq!(pp.shape().unwrap(), (10, 32, 32, 3));
    assert_eq!(summary.frames, 60);
    assert_eq!(pp.labels(), raw.labels());
    for s in &pp.sequences {
        assert!(verify_continuity(s).unwrap().passes(0.5), "{}", s.id);
    }

    let split = split_sequences(&pp.ids(), 0.2, 0.2, 3).unwrap();
    let parts = [&split.train_ids, &split.val_ids, &split.test_ids];
    assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 6);
    let test = pp.subset(&split.test_ids).unwrap();
    let windows = WindowSet::from_sequences(&dataset_to_maps(&test), 3).unwrap();
    assert_eq!(windows.len(), test.len() * window_count(10, 3).unwrap());
}

#[test]
fn autoencoder_learns_digits_and_round_trips_through_disk() {
    let ds = synth::moving_digits(10, 10, 32, 2);
    let split = split_sequences(&ds.ids(), 0.2, 0.2, 0).unwrap();
    let (train, val) = (
        ds.subset(&split.train_ids).unwrap(),
        ds.subset(&split.val_ids).unwrap(),
    );
    let config = AutoencoderConfig {
        input_size: 32,
        loss: LossKind::Mse,
        learning_rate: 3e-3,
        ..AutoencoderConfig::new(vec![8, 16], 1)
    };
    let mut ae = Autoencoder::build(config, 4).unwrap();
    let before = dataset_reconstruction_mse(&ae, &val).unwrap();
    let schedule = Schedule {
        batch_size: 8,
        max_epochs: 8,
        patience: None,
        max_steps: None,
        seed: 4,
    };
    let history = ae.train(&frames(&train), &frames(&val), &schedule).unwrap();
    assert_eq!(history.epochs.len(), 8);
    // Smoothed over two epochs, the validation curve falls from start to end.
    let v: Vec<f64> = history.epochs.iter().map(|e| e.val_loss.unwrap()).collect();
    assert!(v[6] + v[7] < v[0] + v[1], "{v:?}");
    let after = dataset_reconstruction_mse(&ae, &val).unwrap();
    assert!(after < before * 0.5, "{before} -> {after}");

    let dir = tempfile::tempdir().unwrap();
    ae.save(dir.path()).unwrap();
    let back = Autoencoder::load(dir.path()).unwrap();
    assert_eq!(
        extract_latents(&back, &val).unwrap(),
        extract_latents(&ae, &val).unwrap()
    );
}

#[test]
fn predictor_checkpoint_reproduces_predictions() {
    let ds = synth::surveillance(4, 8, 16, 7);
    let set = WindowSet::from_sequences(&dataset_to_maps(&ds), 4).unwrap();
    let mut model = SeqModel::build(
        SeqModelConfig::new(SeqModelKind::Crnn, 4, 4),
        (1, 16, 16),
        3,
    )
    .unwrap();
    model
        .train(
            &set,
            None,
            &Schedule {
                batch_size: 4,
                max_epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = SeqModel::load(dir.path()).unwrap();
    assert_eq!(
        back.predict_set(&set).unwrap(),
        model.predict_set(&set).unwrap()
    );
    assert_eq!(back.config, model.config);
}

#[test]
fn grid_search_picks_a_configuration_by_fold_loss() {
    let ds = synth::surveillance(6, 6, 12, 8);
    let seqs = dataset_to_maps(&ds);
    let folds = kfold_partition(seqs.len(), 3, 1).unwrap();
    assert_eq!(folds.iter().map(|f| f.len()).sum::<usize>(), 6);
    let grid = SeqGrid {
        hidden_layers: vec![1],
        hidden_size: vec![2, 6],
        loss: vec![LossKind::Mse],
        optimizer: vec![OptimizerKind::Adam],
        learning_rate: vec![0.01],
        window: vec![3],
    };
    let configs = grid.enumerate(SeqModelKind::Cnn3d).unwrap();
    assert_eq!(configs.len(), 2);
    let schedule = Schedule {
        batch_size: 8,
        max_epochs: 2,
        ..Default::default()
    };
    let results = search_predictors(&configs, &seqs, 3, &schedule, 0, 1).unwrap();
    let best = select_best(&results).unwrap();
    assert!(results.iter().all(|r| best.val_mse <= r.val_mse));
    assert!(results
        .iter()
        .all(|r| r.folds.as_ref().unwrap().losses.len() == 3));
}
