//! Minimal neural-network toolkit: tensors, a reverse-mode tape, layers,
//! losses, optimizers and a training loop.
//!
//! Everything is generic over [`Float`] so that training runs in `f32` while
//! gradient checks run in `f64` on the same code.

mod conv;
mod float;
mod init;
mod layers;
mod loss;
mod optim;
mod params;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod train;

pub use conv::ConvGeometry;
pub use float::Float;
pub use init::{he_normal, he_std};
pub use layers::{
    CellState, Layer, LayerSpec, Sequential, DEFAULT_LEAKY_SLOPE, NORM_EPS, NORM_MOMENTUM,
};
pub use loss::{loss, loss_grad, LossKind};
pub use optim::{optimizer_step, Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{apply_stat_updates, Gradients, Mode, NodeId, StatUpdate, Tape};
pub use tensor::Tensor;
pub use train::{
    evaluate_loss, fit, train_step, EpochRecord, SampleSource, Schedule, TrainHistory, Trainable,
    Trainer,
};

#[cfg(test)]
mod tests;
