//! Orchestration: the three-stage latent pipeline, the pixel-space baseline,
//! grid search with K-fold validation, inference timing and reports.
//!
//! Every stage records which sequence ids it consumed in an [`AccessLog`], so
//! a finished run can prove that no test sequence reached training or model
//! selection.

mod bench;
mod grid;
mod report;

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use bench::{
    benchmark, benchmark_inference, hardware_descriptor, BenchReport, MIN_ITERS, MIN_WARMUP,
};
pub use grid::{
    grid_enumerate, kfold_partition, kfold_validate, predictor_mse, reconstruction_mse,
    search_autoencoders, search_predictors, select_best, AutoencoderGrid, FoldIds, FoldStats,
    GridConfig, GridResult, HyperGrid, KFoldReport, SeqGrid,
};
pub use report::{
    comparison_table, emit_report, load_report, ssim_histogram_svg, ExperimentReport, FinalLosses,
    TrainRun,
};

use crate::autoencoder::{Autoencoder, AutoencoderConfig, FeatureMap};
use crate::dataio::{split_sequences, Dataset, DatasetSplit, Frame};
use crate::error::{Error, Result};
use crate::metrics::{
    bucketize_intervals, evaluate_frames, kl_gauss, IntervalReport, LatentStats, SsimParams,
};
use crate::nn::Schedule;
use crate::seqmodels::{OutputHead, SeqModel, SeqModelConfig, WindowSet};

/// Population over which latent statistics for the divergence are taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlPopulation {
    #[default]
    Test,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub autoencoder: AutoencoderConfig,
    pub predictor: SeqModelConfig,
    pub ae_schedule: Schedule,
    pub seq_schedule: Schedule,
    pub test_fraction: f64,
    pub val_fraction: f64,
    /// Folds for reporting validation spread on the training portion.
    #[serde(default)]
    pub kfold: Option<usize>,
    #[serde(default)]
    pub kl_population: KlPopulation,
    #[serde(default)]
    pub ssim: SsimParams,
}

impl PipelineConfig {
    pub fn new(autoencoder: AutoencoderConfig, predictor: SeqModelConfig) -> Self {
        Self {
            autoencoder,
            predictor,
            ae_schedule: Schedule::default(),
            seq_schedule: Schedule::default(),
            test_fraction: 0.2,
            val_fraction: 0.2,
            kfold: None,
            kl_population: KlPopulation::Test,
            ssim: SsimParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub autoencoder: u64,
    pub predictor: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            split: seed,
            autoencoder: seed,
            predictor: seed,
        }
    }
}

/// Stage that consumed a set of sequence ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    AutoencoderTrain,
    AutoencoderValidation,
    PredictorTrain,
    PredictorValidation,
    KFold,
    Test,
}

impl Access {
    /// Whether the stage may influence parameters or model choice.
    pub fn is_fitting(self) -> bool {
        self != Access::Test
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessLog {
    pub entries: Vec<(Access, BTreeSet<String>)>,
}

impl AccessLog {
    pub fn record<I, S>(&mut self, access: Access, ids: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set = ids.into_iter().map(|s| s.as_ref().to_string()).collect();
        self.entries.push((access, set));
    }

    /// Union of ids recorded for `access`.
    pub fn ids(&self, access: Access) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|(a, _)| *a == access)
            .flat_map(|(_, s)| s.iter().cloned())
            .collect()
    }

    /// Fails if any test-partition id was consumed by a fitting stage.
    pub fn check(&self, split: &DatasetSplit) -> Result<()> {
        let test: BTreeSet<&String> = split.test_ids.iter().collect();
        for (access, ids) in self.entries.iter().filter(|(a, _)| a.is_fitting()) {
            if let Some(leak) = ids.iter().find(|id| test.contains(id)) {
                return Err(Error::State(format!(
                    "test sequence '{leak}' reached {access:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Wall-clock seconds per pipeline step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub autoencoder_train: f64,
    pub extract: f64,
    pub predictor_train: f64,
    pub predict: f64,
    pub decode: f64,
}

impl StageTiming {
    /// Predictor training and inference.
    pub fn stage2(&self) -> f64 {
        self.predictor_train + self.predict
    }

    /// Autoencoder training, feature extraction and reconstruction.
    pub fn stage13(&self) -> f64 {
        self.autoencoder_train + self.extract + self.decode
    }

    pub fn total(&self) -> f64 {
        self.stage2() + self.stage13()
    }
}

/// Maps of every sequence in each partition, keyed by sequence id.
#[derive(Clone, Debug, Default)]
pub struct Partitioned {
    pub train: Vec<(String, Vec<FeatureMap>)>,
    pub val: Vec<(String, Vec<FeatureMap>)>,
    pub test: Vec<(String, Vec<FeatureMap>)>,
}

/// Trained autoencoder with the latents of every partition.
#[derive(Clone, Debug)]
pub struct Stage1 {
    pub split: DatasetSplit,
    pub autoencoder: Autoencoder,
    pub run: TrainRun,
    pub latents: Partitioned,
    pub timing: StageTiming,
    pub access: AccessLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub split: DatasetSplit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder: Option<TrainRun>,
    /// Predictor run; its metrics score the predicted frames.
    pub predictor: TrainRun,
    /// MSE between predicted and true maps (latent or pixel) on the test set.
    pub test_map_mse: f64,
    pub predictions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<IntervalReport>,
    pub timing: StageTiming,
    pub access: AccessLog,
}

fn frames_of(dataset: &Dataset) -> Vec<Frame> {
    dataset
        .sequences
        .iter()
        .flat_map(|s| s.frames.iter().cloned())
        .collect()
}

fn mean_mse(a: &[Frame], b: &[Frame]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += crate::metrics::mse(&x.data, &y.data)?;
    }
    Ok(total / a.len().max(1) as f64)
}

fn split_of(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(DatasetSplit, Dataset, Dataset, Dataset)> {
    let split = split_sequences(&dataset.ids(), cfg.test_fraction, cfg.val_fraction, seed)?;
    if split.train_ids.is_empty() || split.test_ids.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} sequences give {} training and {} test sequences",
            dataset.len(),
            split.train_ids.len(),
            split.test_ids.len()
        )));
    }
    let train = dataset.subset(&split.train_ids)?;
    let val = dataset.subset(&split.val_ids)?;
    let test = dataset.subset(&split.test_ids)?;
    Ok((split, train, val, test))
}

fn encode_all(ae: &Autoencoder, ds: &Dataset) -> Result<Vec<(String, Vec<FeatureMap>)>> {
    ds.sequences
        .iter()
        .map(|s| Ok((s.id.clone(), ae.encode_batch(&s.frames)?)))
        .collect()
}

/// Splits, trains the autoencoder on training sequences (validating on the
/// validation sequences), scores reconstructions of the test sequences and
/// encodes every partition.
pub fn run_stage1(dataset: &Dataset, cfg: &PipelineConfig, seeds: Seeds) -> Result<Stage1> {
    let (split, train, val, test) =
        split_of(dataset, cfg, seeds.split).map_err(|e| e.in_stage("split"))?;
    let mut access = AccessLog::default();
    let mut timing = StageTiming::default();
    let (train_frames, val_frames, test_frames) =
        (frames_of(&train), frames_of(&val), frames_of(&test));

    let t = Instant::now();
    let mut ae = Autoencoder::build(cfg.autoencoder.clone(), seeds.autoencoder)
        .map_err(|e| e.in_stage("autoencoder"))?;
    access.record(Access::AutoencoderTrain, train.ids());
    access.record(Access::AutoencoderValidation, val.ids());
    let history = ae
        .train(&train_frames, &val_frames, &cfg.ae_schedule)
        .map_err(|e| e.in_stage("autoencoder"))?;
    timing.autoencoder_train = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let latents = (|| -> Result<Partitioned> {
        Ok(Partitioned {
            train: encode_all(&ae, &train)?,
            val: encode_all(&ae, &val)?,
            test: encode_all(&ae, &test)?,
        })
    })()
    .map_err(|e| e.in_stage("extract"))?;
    timing.extract = t.elapsed().as_secs_f64();

    let run = (|| -> Result<TrainRun> {
        access.record(Access::Test, test.ids());
        let rec = ae.reconstruct(&test_frames)?;
        let mut metrics = evaluate_frames(&rec, &test_frames, &cfg.ssim)?;
        let population = match cfg.kl_population {
            KlPopulation::Test => &latents.test,
            KlPopulation::Train => &latents.train,
        };
        let stats = LatentStats::from_rows(
            population
                .iter()
                .flat_map(|(_, m)| m.iter().map(|f| f.data.as_slice())),
        )?;
        metrics.kl = match kl_gauss(&stats) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("divergence skipped: {e}");
                None
            }
        };
        Ok(TrainRun {
            name: "autoencoder".into(),
            config: serde_json::to_value(&cfg.autoencoder)?,
            seed: seeds.autoencoder,
            history,
            losses: FinalLosses {
                train: reconstruction_mse(&ae, &train_frames)?,
                val: if val_frames.is_empty() {
                    None
                } else {
                    Some(reconstruction_mse(&ae, &val_frames)?)
                },
                test: Some(metrics.mse),
            },
            folds: None,
            metrics: Some(metrics),
            checkpoint: None,
        })
    })()
    .map_err(|e| e.in_stage("evaluate"))?;

    Ok(Stage1 {
        split,
        autoencoder: ae,
        run,
        latents,
        timing,
        access,
    })
}

/// Trains a predictor on map sequences and scores decoded predictions
/// against the true next frames.
#[allow(clippy::too_many_arguments)]
fn predict_and_score<D>(
    name: String,
    maps: &Partitioned,
    test_frames: &Dataset,
    config: &SeqModelConfig,
    cfg: &PipelineConfig,
    seed: u64,
    access: &mut AccessLog,
    timing: &mut StageTiming,
    decode: D,
) -> Result<(TrainRun, f64, usize, Option<IntervalReport>)>
where
    D: Fn(&[FeatureMap]) -> Result<Vec<Frame>>,
{
    let shape = maps
        .train
        .first()
        .and_then(|(_, m)| m.first())
        .map(FeatureMap::shape)
        .ok_or_else(|| Error::InsufficientData("no training maps".into()).in_stage("predictor"))?;
    let k = config.window;
    let train = WindowSet::from_sequences(&maps.train, k).map_err(|e| e.in_stage("predictor"))?;
    let val = if maps.val.is_empty() {
        None
    } else {
        Some(WindowSet::from_sequences(&maps.val, k).map_err(|e| e.in_stage("predictor"))?)
    };
    let test = WindowSet::from_sequences(&maps.test, k).map_err(|e| e.in_stage("predictor"))?;

    let t = Instant::now();
    let folds = match cfg.kfold {
        Some(folds) => {
            let pool: Vec<(String, Vec<FeatureMap>)> =
                maps.train.iter().chain(&maps.val).cloned().collect();
            let report = kfold_validate(config, &pool, folds, &cfg.seq_schedule, seed)
                .map_err(|e| e.in_stage("kfold"))?;
            for f in &report.folds {
                access.record(Access::KFold, f.train.iter().chain(&f.val));
            }
            Some(report.stats)
        }
        None => None,
    };
    let mut model =
        SeqModel::build(config.clone(), shape, seed).map_err(|e| e.in_stage("predictor"))?;
    access.record(Access::PredictorTrain, &train.ids);
    if let Some(v) = &val {
        access.record(Access::PredictorValidation, &v.ids);
    }
    let history = model
        .train(&train, val.as_ref(), &cfg.seq_schedule)
        .map_err(|e| e.in_stage("predictor"))?;
    timing.predictor_train = t.elapsed().as_secs_f64();

    access.record(Access::Test, &test.ids);
    let t = Instant::now();
    let predicted = model
        .predict_set(&test)
        .map_err(|e| e.in_stage("predictor"))?;
    timing.predict = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let frames = decode(&predicted).map_err(|e| e.in_stage("decode"))?;
    timing.decode += t.elapsed().as_secs_f64();

    (|| {
        let mut map_mse = 0.0;
        for (i, p) in predicted.iter().enumerate() {
            map_mse += crate::metrics::mse(&p.data, &test.target(i).data)?;
        }
        let map_mse = map_mse / predicted.len().max(1) as f64;
        let truth: Vec<Frame> = test
            .positions()
            .iter()
            .map(|&(s, t)| test_frames.sequences[s].frames[t + k].clone())
            .collect();
        let metrics = evaluate_frames(&frames, &truth, &cfg.ssim)?;
        let intervals = bucketize_intervals(&metrics.per_frame_ssim).ok();
        let run = TrainRun {
            name,
            config: serde_json::to_value(config)?,
            seed,
            history,
            losses: FinalLosses {
                train: predictor_mse(&model, &train)?,
                val: val.as_ref().map(|v| predictor_mse(&model, v)).transpose()?,
                test: Some(map_mse),
            },
            folds,
            metrics: Some(metrics),
            checkpoint: None,
        };
        Ok((run, map_mse, predicted.len(), intervals))
    })()
    .map_err(|e: Error| e.in_stage("evaluate"))
}

/// Stages two and three on top of a finished stage one.
pub fn run_stages23(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    stage1: &Stage1,
    predictor_seed: u64,
) -> Result<PipelineReport> {
    let test = dataset
        .subset(&stage1.split.test_ids)
        .map_err(|e| e.in_stage("split"))?;
    let mut access = stage1.access.clone();
    let mut timing = stage1.timing;
    let ae = &stage1.autoencoder;
    let (predictor, test_map_mse, predictions, intervals) = predict_and_score(
        format!("latent/{}", cfg.predictor.kind),
        &stage1.latents,
        &test,
        &cfg.predictor,
        cfg,
        predictor_seed,
        &mut access,
        &mut timing,
        |maps| ae.decode_batch(maps),
    )?;
    access.check(&stage1.split)?;
    Ok(PipelineReport {
        split: stage1.split.clone(),
        autoencoder: Some(stage1.run.clone()),
        predictor,
        test_map_mse,
        predictions,
        intervals,
        timing,
        access,
    })
}

/// The full latent-space pipeline: autoencoder, predictor on latents,
/// decoder, metrics.
pub fn run_pipeline(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    seeds: Seeds,
) -> Result<PipelineReport> {
    let stage1 = run_stage1(dataset, cfg, seeds)?;
    run_stages23(dataset, cfg, &stage1, seeds.predictor)
}

/// The same predictor kind trained directly on frames with a sigmoid head.
pub fn run_baseline(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    seeds: Seeds,
) -> Result<PipelineReport> {
    let (split, train, val, test) =
        split_of(dataset, cfg, seeds.split).map_err(|e| e.in_stage("split"))?;
    let maps = Partitioned {
        train: dataset_to_maps(&train),
        val: dataset_to_maps(&val),
        test: dataset_to_maps(&test),
    };
    let config = SeqModelConfig {
        head: OutputHead::Sigmoid,
        ..cfg.predictor.clone()
    };
    let mut access = AccessLog::default();
    let mut timing = StageTiming::default();
    let (predictor, test_map_mse, predictions, intervals) = predict_and_score(
        format!("pixel/{}", config.kind),
        &maps,
        &test,
        &config,
        cfg,
        seeds.predictor,
        &mut access,
        &mut timing,
        |maps| Ok(maps.iter().map(FeatureMap::to_frame).collect()),
    )?;
    // Converting pixel maps back to frames is not a reconstruction stage.
    timing.decode = 0.0;
    access.check(&split)?;
    Ok(PipelineReport {
        split,
        autoencoder: None,
        predictor,
        test_map_mse,
        predictions,
        intervals,
        timing,
        access,
    })
}

/// Stores map sequences as a dataset whose frames are the maps in
/// `height × width × channels` order, so they share the array container.
pub fn maps_to_dataset(seqs: &[(String, Vec<FeatureMap>)]) -> Dataset {
    Dataset::new(
        seqs.iter()
            .map(|(id, maps)| crate::dataio::FrameSequence {
                id: id.clone(),
                frames: maps.iter().map(FeatureMap::to_frame).collect(),
                label: None,
            })
            .collect(),
    )
}

/// Inverse of [`maps_to_dataset`]; also views plain frame datasets as maps.
pub fn dataset_to_maps(ds: &Dataset) -> Vec<(String, Vec<FeatureMap>)> {
    ds.sequences
        .iter()
        .map(|s| {
            (
                s.id.clone(),
                s.frames.iter().map(FeatureMap::from_frame).collect(),
            )
        })
        .collect()
}

/// Encodes every sequence of `ds`.
pub fn extract_latents(model: &Autoencoder, ds: &Dataset) -> Result<Dataset> {
    let mut out = maps_to_dataset(&encode_all(model, ds)?);
    for (o, s) in out.sequences.iter_mut().zip(&ds.sequences) {
        o.label = s.label.clone();
    }
    Ok(out)
}

/// Mean reconstruction MSE of `model` over a dataset.
pub fn dataset_reconstruction_mse(model: &Autoencoder, dataset: &Dataset) -> Result<f64> {
    let frames = frames_of(dataset);
    let rec = model.reconstruct(&frames)?;
    mean_mse(&rec, &frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodels::SeqModelKind;
    use crate::synth;

    fn tiny() -> (Dataset, PipelineConfig) {
        let ds = synth::moving_digits(10, 8, 32, 3);
        let ae = AutoencoderConfig {
            input_size: 32,
            ..AutoencoderConfig::new(vec![4, 8], 1)
        };
        let mut cfg = PipelineConfig::new(ae, SeqModelConfig::new(SeqModelKind::ConvLstm, 4, 3));
        cfg.ae_schedule = Schedule {
            batch_size: 16,
            max_epochs: 2,
            ..Default::default()
        };
        cfg.seq_schedule = Schedule {
            batch_size: 8,
            max_epochs: 2,
            ..Default::default()
        };
        cfg.kfold = Some(2);
        (ds, cfg)
    }

    #[test]
    fn pipeline_tracks_ids_and_counts_predictions() {
        let (ds, cfg) = tiny();
        let rep = run_pipeline(&ds, &cfg, Seeds::all(1)).unwrap();
        assert_eq!(rep.split.test_ids.len(), 2);
        assert_eq!(rep.predictions, 2 * (8 - 3));
        let m = rep.predictor.metrics.as_ref().unwrap();
        assert_eq!(m.count, rep.predictions);
        assert!(rep.access.check(&rep.split).is_ok());
        let test: BTreeSet<String> = rep.split.test_ids.iter().cloned().collect();
        assert_eq!(rep.access.ids(Access::Test), test);
        for a in [
            Access::AutoencoderTrain,
            Access::PredictorTrain,
            Access::KFold,
        ] {
            assert!(rep.access.ids(a).is_disjoint(&test), "{a:?}");
        }
        assert_eq!(rep.predictor.folds.as_ref().unwrap().losses.len(), 2);
        assert!(rep.autoencoder.as_ref().unwrap().metrics.is_some());
    }

    #[test]
    fn latents_round_trip_through_datasets() {
        let (ds, cfg) = tiny();
        let ae = Autoencoder::build(cfg.autoencoder.clone(), 0).unwrap();
        let lat = extract_latents(&ae, &ds).unwrap();
        assert_eq!(lat.shape().unwrap(), (8, 8, 8, 8));
        let maps = dataset_to_maps(&lat);
        assert_eq!(maps[0].1[0], ae.encode(&ds.sequences[0].frames[0]).unwrap());
        assert_eq!(
            maps_to_dataset(&maps).sequences[3].frames,
            lat.sequences[3].frames
        );
    }

    #[test]
    fn leaks_are_detected() {
        let split = DatasetSplit {
            train_ids: vec!["a".into()],
            val_ids: vec![],
            test_ids: vec!["b".into()],
            seed: 0,
        };
        let mut log = AccessLog::default();
        log.record(Access::Test, ["b"]);
        assert!(log.check(&split).is_ok());
        log.record(Access::PredictorValidation, ["b"]);
        assert!(matches!(log.check(&split), Err(Error::State(_))));
    }

    #[test]
    fn baseline_outputs_frames_in_range() {
        let (ds, mut cfg) = tiny();
        cfg.kfold = None;
        let rep = run_baseline(&ds, &cfg, Seeds::all(2)).unwrap();
        assert!(rep.autoencoder.is_none());
        assert_eq!(rep.predictor.name, "pixel/convlstm");
        assert_eq!(rep.predictions, 10);
        assert!(rep.predictor.config["head"] == "sigmoid");
        assert_eq!(rep.timing.stage13(), 0.0);
    }

    #[test]
    fn stage_errors_carry_their_tag() {
        let (ds, mut cfg) = tiny();
        cfg.predictor.window = 8;
        let err = run_pipeline(&ds, &cfg, Seeds::all(0)).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Stage {
                    stage: "predictor",
                    ..
                }
            ),
            "{err}"
        );
        let few = synth::moving_digits(2, 8, 32, 0);
        let err = run_pipeline(&few, &cfg, Seeds::all(0)).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "split", .. }), "{err}");
    }
}
