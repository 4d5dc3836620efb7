//! Mini-batch training loop shared by the autoencoder and the sequence predictors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use super::optim::{Optimizer, OptimizerConfig};
use super::tape::{apply_stat_updates, Mode, NodeId, Tape};
use super::{Float, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Source of `(input, target)` mini-batches addressed by sample index.
pub trait SampleSource<T: Float>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)>;
}

/// A network that maps one batched input tensor to one batched output.
pub trait Trainable<T: Float> {
    fn store(&self) -> &ParamStore<T>;

    fn store_mut(&mut self) -> &mut ParamStore<T>;

    fn forward_node(&self, tape: &mut Tape<T>, input: NodeId) -> Result<NodeId>;

    fn loss_kind(&self) -> LossKind;

    /// Eval-mode forward pass on a batch.
    fn infer(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(self.store(), Mode::Eval);
        let x = tape.input(input);
        let y = self.forward_node(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping patience in epochs, applied when validation data is given.
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps across the whole run.
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 100,
            patience: Some(10),
            max_steps: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Per-epoch loss curve of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub steps: u64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Optimizer plus loop position; everything needed to resume a run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub optimizer: Optimizer,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub history: TrainHistory,
    best: Option<ParamStore<T>>,
    bad_epochs: usize,
}

impl<T: Float> Trainer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            optimizer: Optimizer::new(config),
            epoch: 0,
            history: TrainHistory::default(),
            best: None,
            bad_epochs: 0,
        }
    }

    /// Continues a run from saved state; the patience counter is recovered
    /// from the history.
    pub fn resume(
        optimizer: Optimizer,
        epoch: usize,
        history: TrainHistory,
        best: Option<ParamStore<T>>,
    ) -> Self {
        let bad_epochs = match history.best_epoch {
            Some(b) => history.epochs.iter().filter(|e| e.epoch > b).count(),
            None => 0,
        };
        Self {
            optimizer,
            epoch,
            history,
            best,
            bad_epochs,
        }
    }

    /// Copies the best-validation parameters, if any, into `store`.
    pub fn restore_best(&self, store: &mut ParamStore<T>) -> Result<()> {
        match &self.best {
            Some(b) => store.copy_values_from(b),
            None => Ok(()),
        }
    }

    /// Best-validation parameters seen so far in the current run.
    pub fn best(&self) -> Option<&ParamStore<T>> {
        self.best.as_ref()
    }
}

/// One optimizer update on a batch; returns the batch loss before the update.
pub fn train_step<T: Float, M: Trainable<T> + ?Sized>(
    model: &mut M,
    optimizer: &mut Optimizer,
    input: Tensor<T>,
    target: &Tensor<T>,
) -> Result<f64> {
    let (loss, updates, grads) = {
        let mut tape = Tape::new(model.store(), Mode::Train);
        let x = tape.input(input);
        let y = model.forward_node(&mut tape, x)?;
        let l = tape.loss(y, target, model.loss_kind())?;
        let loss = tape.value(l).data()[0].f64();
        let grads = tape.backward(l)?;
        let collected: Vec<_> = grads.params().map(|(p, g)| (p, g.to_vec())).collect();
        (loss, tape.take_stat_updates(), collected)
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            step: optimizer.step as usize,
        });
    }
    let store = model.store_mut();
    store.zero_grad();
    for (p, g) in &grads {
        store.accumulate_grad(*p, g)?;
    }
    optimizer.step(store)?;
    apply_stat_updates(store, &updates);
    Ok(loss)
}

/// Eval-mode loss over a whole sample source.
pub fn evaluate_loss<T: Float, M: Trainable<T> + ?Sized>(
    model: &M,
    data: &dyn SampleSource<T>,
    batch_size: usize,
) -> Result<f64> {
    let kind = model.loss_kind();
    // RMSE is aggregated as the root of the pooled squared error.
    let pooled = if kind == LossKind::Rmse {
        LossKind::Mse
    } else {
        kind
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let pred = model.infer(x)?;
        let l = super::loss::loss(pooled, pred.data(), y.data())?.f64();
        total += l * y.len() as f64;
        count += y.len();
    }
    if count == 0 {
        return Err(Error::InsufficientData("no samples to evaluate".into()));
    }
    let mean = total / count as f64;
    Ok(if kind == LossKind::Rmse {
        mean.sqrt()
    } else {
        mean
    })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs epochs until `schedule.max_epochs`, early stopping on validation
/// loss. Parameters are left at their last-epoch values so the run can be
/// checkpointed and resumed; see [`Trainer::restore_best`].
pub fn fit<T: Float, M: Trainable<T> + ?Sized>(
    model: &mut M,
    trainer: &mut Trainer<T>,
    train: &dyn SampleSource<T>,
    val: Option<&dyn SampleSource<T>>,
    schedule: &Schedule,
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let bs = schedule.batch_size.max(1);
    while trainer.epoch < schedule.max_epochs {
        if schedule
            .max_steps
            .is_some_and(|m| trainer.optimizer.step >= m)
        {
            break;
        }
        let epoch = trainer.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(schedule.seed, epoch));
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(bs) {
            if schedule
                .max_steps
                .is_some_and(|m| trainer.optimizer.step >= m)
            {
                break;
            }
            let (x, y) = train.batch(chunk)?;
            let step = trainer.optimizer.step as usize;
            let l = train_step(model, &mut trainer.optimizer, x, &y).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, step },
                other => other,
            })?;
            sum += l * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = sum / seen.max(1) as f64;
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(evaluate_loss(model, v, bs)?),
            _ => None,
        };
        if let Some(vl) = val_loss {
            if !vl.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: trainer.optimizer.step as usize,
                });
            }
        }
        log::debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:?}");
        trainer.history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        trainer.history.steps = trainer.optimizer.step;
        trainer.epoch += 1;
        if let Some(vl) = val_loss {
            let improved = trainer.history.best_val_loss.is_none_or(|b| vl < b);
            if improved {
                trainer.history.best_val_loss = Some(vl);
                trainer.history.best_epoch = Some(epoch);
                trainer.best = Some(model.store().clone());
                trainer.bad_epochs = 0;
            } else {
                trainer.bad_epochs += 1;
                if schedule.patience.is_some_and(|p| trainer.bad_epochs >= p) {
                    trainer.history.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(trainer.history.clone())
}
