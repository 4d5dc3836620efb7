//! Hyperparameter grids, K-fold validation by sequence, and parallel search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, AutoencoderConfig, FeatureMap};
use crate::dataio::Frame;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{LossKind, OptimizerKind, Schedule};
use crate::seqmodels::{SeqModel, SeqModelConfig, SeqModelKind, WindowSet};

/// Search space of the autoencoder stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderGrid {
    pub dims: Vec<Vec<usize>>,
    pub loss: Vec<LossKind>,
    pub optimizer: Vec<OptimizerKind>,
    pub learning_rate: Vec<f64>,
}

impl Default for AutoencoderGrid {
    /// The default autoencoder grid.
    fn default() -> Self {
        Self {
            dims: vec![vec![32, 64, 128], vec![64, 128, 256]],
            loss: LossKind::ALL.to_vec(),
            optimizer: vec![OptimizerKind::Adam, OptimizerKind::RmsProp],
            learning_rate: vec![0.001, 0.0005],
        }
    }
}

/// Search space of the predictor stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqGrid {
    pub hidden_layers: Vec<usize>,
    pub hidden_size: Vec<usize>,
    pub loss: Vec<LossKind>,
    pub optimizer: Vec<OptimizerKind>,
    pub learning_rate: Vec<f64>,
    pub window: Vec<usize>,
}

impl Default for SeqGrid {
    /// The default predictor grid.
    fn default() -> Self {
        Self {
            hidden_layers: vec![1, 2, 3],
            hidden_size: vec![128, 256],
            loss: LossKind::ALL.to_vec(),
            optimizer: vec![OptimizerKind::Adam, OptimizerKind::RmsProp],
            learning_rate: vec![0.01, 0.001, 0.0001],
            window: vec![3, 5, 10],
        }
    }
}

/// A named-axis search space; axes are enumerated in declaration order with
/// the last axis varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "lowercase")]
pub enum HyperGrid {
    #[serde(rename = "ae")]
    Autoencoder(AutoencoderGrid),
    #[serde(rename = "seq")]
    Sequence(SeqGrid),
}

/// One point of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Autoencoder(AutoencoderConfig),
    Sequence(SeqModelConfig),
}

fn nonempty<T>(name: &str, axis: &[T]) -> Result<()> {
    if axis.is_empty() {
        Err(Error::Grid(format!("axis '{name}' is empty")))
    } else {
        Ok(())
    }
}

impl AutoencoderGrid {
    /// Cartesian product over `base`, which supplies the non-grid fields.
    pub fn enumerate(&self, base: &AutoencoderConfig) -> Result<Vec<AutoencoderConfig>> {
        nonempty("dims", &self.dims)?;
        nonempty("loss", &self.loss)?;
        nonempty("optimizer", &self.optimizer)?;
        nonempty("learning_rate", &self.learning_rate)?;
        let mut out = Vec::new();
        for dims in &self.dims {
            for &loss in &self.loss {
                for &optimizer in &self.optimizer {
                    for &learning_rate in &self.learning_rate {
                        let c = AutoencoderConfig {
                            dims: dims.clone(),
                            loss,
                            optimizer,
                            learning_rate,
                            ..base.clone()
                        };
                        c.validate().map_err(|e| Error::Grid(e.to_string()))?;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl SeqGrid {
    /// Cartesian product for one model kind; the hidden-layer axis is dropped
    /// for kinds that do not stack layers.
    pub fn enumerate(&self, kind: SeqModelKind) -> Result<Vec<SeqModelConfig>> {
        let layers: Vec<Option<usize>> = if kind.uses_hidden_layers() {
            nonempty("hidden_layers", &self.hidden_layers)?;
            self.hidden_layers.iter().map(|&l| Some(l)).collect()
        } else {
            vec![None]
        };
        nonempty("hidden_size", &self.hidden_size)?;
        nonempty("loss", &self.loss)?;
        nonempty("optimizer", &self.optimizer)?;
        nonempty("learning_rate", &self.learning_rate)?;
        nonempty("window", &self.window)?;
        let mut out = Vec::new();
        for &hidden_layers in &layers {
            for &hidden_size in &self.hidden_size {
                for &loss in &self.loss {
                    for &optimizer in &self.optimizer {
                        for &learning_rate in &self.learning_rate {
                            for &window in &self.window {
                                let c = SeqModelConfig {
                                    hidden_layers,
                                    hidden_size,
                                    loss,
                                    optimizer,
                                    learning_rate,
                                    window,
                                    ..SeqModelConfig::new(kind, hidden_size, window)
                                };
                                c.validate().map_err(|e| Error::Grid(e.to_string()))?;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Enumerates `grid`. Predictor grids need a model kind; autoencoder grids use
/// single-channel 64×64 inputs as the non-grid fields.
pub fn grid_enumerate(grid: &HyperGrid, kind: Option<SeqModelKind>) -> Result<Vec<GridConfig>> {
    match grid {
        HyperGrid::Autoencoder(g) => Ok(g
            .enumerate(&AutoencoderConfig::new(vec![1], 1))?
            .into_iter()
            .map(GridConfig::Autoencoder)
            .collect()),
        HyperGrid::Sequence(g) => {
            let kind =
                kind.ok_or_else(|| Error::Grid("a predictor grid needs a model kind".into()))?;
            Ok(g.enumerate(kind)?
                .into_iter()
                .map(GridConfig::Sequence)
                .collect())
        }
    }
}

/// Mean and sample standard deviation of per-fold validation losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub losses: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl FoldStats {
    pub fn from_losses(losses: Vec<f64>) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::Fold("no fold losses".into()));
        }
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let std = if losses.len() < 2 {
            0.0
        } else {
            (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { losses, mean, std })
    }
}

/// Assigns `n` items to `k` folds after a seeded shuffle; fold sizes differ
/// by at most one and every item lands in exactly one fold.
pub fn kfold_partition(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Fold(format!("K must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Fold(format!(
            "K = {k} exceeds the {n} available sequences"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, item) in order.into_iter().enumerate() {
        folds[i % k].push(item);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Sequence ids seen by each fold's training and validation side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Result of [`kfold_validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub stats: FoldStats,
    pub folds: Vec<FoldIds>,
}

/// Trains one predictor per fold on the other folds' sequences and reports
/// the validation MSE of each. Folds are formed over whole sequences.
pub fn kfold_validate(
    config: &SeqModelConfig,
    sequences: &[(String, Vec<FeatureMap>)],
    k: usize,
    schedule: &Schedule,
    seed: u64,
) -> Result<KFoldReport> {
    let folds = kfold_partition(sequences.len(), k, seed)?;
    let shape = sequences[0]
        .1
        .first()
        .map(FeatureMap::shape)
        .ok_or_else(|| {
            Error::InsufficientData(format!("sequence '{}' is empty", sequences[0].0))
        })?;
    let mut losses = Vec::with_capacity(k);
    let mut ids = Vec::with_capacity(k);
    for fold in &folds {
        let (val, train): (Vec<_>, Vec<_>) = sequences
            .iter()
            .enumerate()
            .partition(|(i, _)| fold.binary_search(i).is_ok());
        let val: Vec<(String, Vec<FeatureMap>)> = val.into_iter().map(|(_, s)| s.clone()).collect();
        let train: Vec<(String, Vec<FeatureMap>)> =
            train.into_iter().map(|(_, s)| s.clone()).collect();
        let train_set = WindowSet::from_sequences(&train, config.window)?;
        let val_set = WindowSet::from_sequences(&val, config.window)?;
        let mut model = SeqModel::build(config.clone(), shape, seed)?;
        model.train(&train_set, None, schedule)?;
        losses.push(predictor_mse(&model, &val_set)?);
        ids.push(FoldIds {
            train: train_set.ids.clone(),
            val: val_set.ids.clone(),
        });
    }
    Ok(KFoldReport {
        stats: FoldStats::from_losses(losses)?,
        folds: ids,
    })
}

/// Element-wise MSE of a predictor's outputs over every window of `set`.
pub fn predictor_mse(model: &SeqModel, set: &WindowSet) -> Result<f64> {
    let pred = model.predict_set(set)?;
    let mut total = 0.0;
    for (i, p) in pred.iter().enumerate() {
        total += metrics::mse(&p.data, &set.target(i).data)?;
    }
    Ok(total / pred.len().max(1) as f64)
}

/// Reconstruction MSE of an autoencoder over `frames`.
pub fn reconstruction_mse(model: &Autoencoder, frames: &[Frame]) -> Result<f64> {
    let rec = model.reconstruct(frames)?;
    let mut total = 0.0;
    for (r, f) in rec.iter().zip(frames) {
        total += metrics::mse(&r.data, &f.data)?;
    }
    Ok(total / frames.len().max(1) as f64)
}

/// Score of one grid point; lower `val_mse` is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub index: usize,
    pub config: GridConfig,
    pub val_mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<FoldStats>,
}

/// Lowest validation MSE, earliest grid index on ties.
pub fn select_best(results: &[GridResult]) -> Option<&GridResult> {
    results
        .iter()
        .min_by(|a, b| a.val_mse.total_cmp(&b.val_mse).then(a.index.cmp(&b.index)))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Trains every autoencoder config on `train` and scores it on `val`.
pub fn search_autoencoders(
    configs: &[AutoencoderConfig],
    train: &[Frame],
    val: &[Frame],
    schedule: &Schedule,
    seed: u64,
    jobs: usize,
) -> Result<Vec<GridResult>> {
    if val.is_empty() {
        return Err(Error::InsufficientData(
            "grid search needs validation frames".into(),
        ));
    }
    pool(jobs)?.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(index, c)| {
                let mut model = Autoencoder::build(c.clone(), seed)?;
                model.train(train, val, schedule)?;
                Ok(GridResult {
                    index,
                    config: GridConfig::Autoencoder(c.clone()),
                    val_mse: reconstruction_mse(&model, val)?,
                    folds: None,
                })
            })
            .collect()
    })
}

/// K-fold validates every predictor config on `sequences` (the training
/// portion only).
pub fn search_predictors(
    configs: &[SeqModelConfig],
    sequences: &[(String, Vec<FeatureMap>)],
    k: usize,
    schedule: &Schedule,
    seed: u64,
    jobs: usize,
) -> Result<Vec<GridResult>> {
    pool(jobs)?.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(index, c)| {
                let report = kfold_validate(c, sequences, k, schedule, seed)?;
                Ok(GridResult {
                    index,
                    config: GridConfig::Sequence(c.clone()),
                    val_mse: report.stats.mean,
                    folds: Some(report.stats),
                })
            })
            .collect()
    })
}
