//! Latent-space video frame prediction.
//!
//! A convolutional autoencoder compresses frames to bottleneck feature maps,
//! a sequence model forecasts the next map from a window of previous ones,
//! and the decoder turns the forecast back into a frame. The crate also holds
//! the preprocessing chain, image-quality metrics, grid search, a pixel-space
//! baseline and inference benchmarking.

pub mod autoencoder;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod seqmodels;
pub mod synth;

pub use error::{Error, Result};
