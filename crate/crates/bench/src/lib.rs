//! Shared fixtures for the criterion benchmarks.

use latentcast::autoencoder::{Autoencoder, AutoencoderConfig, FeatureMap};
use latentcast::dataio::Frame;
use latentcast::nn::Tensor;
use latentcast::seqmodels::{stack_windows, OutputHead, SeqModel, SeqModelConfig, SeqModelKind};
use latentcast::{synth, Result};

/// Frame side used by every fixture.
pub const SIDE: usize = 64;

/// `n` moving-digit frames taken from consecutive sequences.
pub fn frames(n: usize, seed: u64) -> Vec<Frame> {
    let len = 20;
    let ds = synth::moving_digits(n.div_ceil(len), len, SIDE, seed);
    ds.sequences
        .into_iter()
        .flat_map(|s| s.frames)
        .take(n)
        .collect()
}

/// Untrained autoencoder with the full-size three-block layout.
pub fn autoencoder(seed: u64) -> Result<Autoencoder> {
    Autoencoder::build(AutoencoderConfig::new(vec![64, 128, 256], 1), seed)
}

/// One predictor working on latents and the same kind working on pixels,
/// each with a single input window.
pub struct PredictorPair {
    pub latent: SeqModel,
    pub latent_input: Tensor<f32>,
    pub pixel: SeqModel,
    pub pixel_input: Tensor<f32>,
}

pub fn predictor_pair(
    kind: SeqModelKind,
    hidden: usize,
    window: usize,
    seed: u64,
) -> Result<PredictorPair> {
    let fr = frames(window, seed);
    let ae = autoencoder(seed)?;
    let latents = ae.encode_batch(&fr)?;
    let pixels: Vec<FeatureMap> = fr.iter().map(FeatureMap::from_frame).collect();
    let config = SeqModelConfig::new(kind, hidden, window);
    let latent = SeqModel::build(config.clone(), latents[0].shape(), seed)?;
    let pixel_config = SeqModelConfig {
        head: OutputHead::Sigmoid,
        ..config
    };
    let pixel = SeqModel::build(pixel_config, pixels[0].shape(), seed)?;
    Ok(PredictorPair {
        latent,
        latent_input: stack_windows(&[&latents])?,
        pixel,
        pixel_input: stack_windows(&[&pixels])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_expected_shapes() {
        assert_eq!(frames(25, 0).len(), 25);
        let pair = predictor_pair(SeqModelKind::ConvLstm, 8, 3, 0).unwrap();
        assert_eq!(pair.latent_input.shape(), &[1, 256, 3, 8, 8]);
        assert_eq!(pair.pixel_input.shape(), &[1, 1, 3, 64, 64]);
        let y = pair.pixel.predict_tensor(pair.pixel_input.clone()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
    }
}
