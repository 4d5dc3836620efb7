//! Convolutional autoencoder: the encoder extracts bottleneck feature maps
//! from frames and the decoder reconstructs frames from (predicted) maps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Frame;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Manifest};
use crate::nn::{
    fit, LayerSpec, LossKind, Mode, NodeId, OptimizerConfig, OptimizerKind, ParamStore,
    SampleSource, Schedule, Sequential, Tape, Tensor, TrainHistory, Trainable, Trainer,
    DEFAULT_LEAKY_SLOPE,
};

/// Batch size used for encoding and decoding.
const INFER_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Channel ladder of the encoder, e.g. `[64, 128, 256]`.
    pub dims: Vec<usize>,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub input_channels: usize,
    pub input_size: usize,
    #[serde(default = "default_slope")]
    pub slope: f64,
    /// Standardize latent channels after training (off by default).
    #[serde(default)]
    pub standardize_latents: bool,
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl AutoencoderConfig {
    pub fn new(dims: Vec<usize>, input_channels: usize) -> Self {
        Self {
            dims,
            loss: LossKind::L1,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            input_channels,
            input_size: 64,
            slope: DEFAULT_LEAKY_SLOPE,
            standardize_latents: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::Config(format!(
                "invalid channel ladder {:?}",
                self.dims
            )));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "input channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        let f = 1usize << self.dims.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size,
                self.dims.len()
            )));
        }
        OptimizerConfig::new(self.optimizer, self.learning_rate).validate()
    }

    /// Bottleneck shape as (channels, height, width).
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let side = self.input_size >> self.dims.len();
        (*self.dims.last().unwrap_or(&0), side, side)
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut prev = self.input_channels;
        for &d in &self.dims {
            specs.push(LayerSpec::Conv2d {
                in_channels: prev,
                out_channels: d,
                kernel: 3,
                stride: 2,
                padding: 1,
            });
            specs.push(LayerSpec::Norm { channels: d });
            specs.push(LayerSpec::LeakyRelu { slope: self.slope });
            prev = d;
        }
        specs
    }

    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for i in (0..self.dims.len()).rev() {
            let out = if i == 0 {
                self.input_channels
            } else {
                self.dims[i - 1]
            };
            specs.push(LayerSpec::ConvTranspose2d {
                in_channels: self.dims[i],
                out_channels: out,
                kernel: 3,
                stride: 2,
                padding: 1,
                output_padding: 1,
            });
            if i == 0 {
                specs.push(LayerSpec::Sigmoid);
            } else {
                specs.push(LayerSpec::Norm { channels: out });
                specs.push(LayerSpec::LeakyRelu { slope: self.slope });
            }
        }
        specs
    }
}

/// Bottleneck activation volume, channel-major (`channels × height × width`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Size(format!(
                "{channels}x{height}x{width} map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Row-major `height × width × channels` copy, the interchange layout.
    pub fn to_hwc(&self) -> Vec<f32> {
        Frame::from_chw(self.height, self.width, self.channels, &self.data)
            .map(|f| f.data)
            .expect("consistent map")
    }

    pub fn from_hwc(height: usize, width: usize, channels: usize, hwc: &[f32]) -> Result<Self> {
        let f = Frame::new(height, width, channels, hwc.to_vec())?;
        Self::new(channels, height, width, f.to_chw())
    }

    /// A frame viewed as a map (used by the pixel-space baseline).
    pub fn from_frame(frame: &Frame) -> Self {
        Self {
            channels: frame.channels,
            height: frame.height,
            width: frame.width,
            data: frame.to_chw(),
        }
    }

    pub fn to_frame(&self) -> Frame {
        Frame::from_chw(self.height, self.width, self.channels, &self.data).expect("consistent map")
    }
}

/// Stacks channel-major items into one `[n, c, h, w]` tensor.
pub(crate) fn stack_chw<'a>(
    items: impl Iterator<Item = &'a [f32]>,
    shape: (usize, usize, usize),
) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    for it in items {
        data.extend_from_slice(it);
        n += 1;
    }
    Tensor::new(vec![n, shape.0, shape.1, shape.2], data)
}

/// Per-channel affine applied to latents when standardization is enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Frames as `(x, x)` reconstruction pairs.
pub struct FramePairs {
    data: Vec<Vec<f32>>,
    shape: (usize, usize, usize),
}

impl FramePairs {
    pub fn new(frames: &[Frame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InsufficientData("no frames".into()))?;
        let (h, w, c) = first.dims();
        if let Some(f) = frames.iter().find(|f| f.dims() != (h, w, c)) {
            return Err(Error::InconsistentSequence(format!(
                "frame {:?} differs from {:?}",
                f.dims(),
                (h, w, c)
            )));
        }
        Ok(Self {
            data: frames.iter().map(Frame::to_chw).collect(),
            shape: (c, h, w),
        })
    }
}

impl SampleSource<f32> for FramePairs {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let x = stack_chw(indices.iter().map(|&i| self.data[i].as_slice()), self.shape)?;
        Ok((x.clone(), x))
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub seed: u64,
    pub encoder: Sequential,
    pub decoder: Sequential,
    store: ParamStore<f32>,
    trainer: Option<Trainer<f32>>,
    latent_norm: Option<LatentNorm>,
}

impl Trainable<f32> for Autoencoder {
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn forward_node(&self, tape: &mut Tape<f32>, input: NodeId) -> Result<NodeId> {
        let z = self.encoder.forward_on(tape, input)?;
        self.decoder.forward_on(tape, z)
    }

    fn loss_kind(&self) -> LossKind {
        self.config.loss
    }
}

impl Autoencoder {
    /// Builds encoder and decoder with He-initialized weights.
    pub fn build(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Sequential::build(
            config.encoder_specs(),
            "encoder",
            config.slope,
            &mut store,
            &mut rng,
        );
        let decoder = Sequential::build(
            config.decoder_specs(),
            "decoder",
            config.slope,
            &mut store,
            &mut rng,
        );
        Ok(Self {
            config,
            seed,
            encoder,
            decoder,
            store,
            trainer: None,
            latent_norm: None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn history(&self) -> Option<&TrainHistory> {
        self.trainer.as_ref().map(|t| &t.history)
    }

    /// Parameters used for inference: the best-validation snapshot if one exists.
    pub fn inference_store(&self) -> &ParamStore<f32> {
        self.trainer
            .as_ref()
            .and_then(|t| t.best())
            .unwrap_or(&self.store)
    }

    pub fn latent_norm(&self) -> Option<&LatentNorm> {
        self.latent_norm.as_ref()
    }

    /// Trains on reconstruction pairs, continuing any earlier run of this model.
    pub fn train(
        &mut self,
        train: &[Frame],
        val: &[Frame],
        schedule: &Schedule,
    ) -> Result<TrainHistory> {
        let train_src = FramePairs::new(train)?;
        let val_src = if val.is_empty() {
            None
        } else {
            Some(FramePairs::new(val)?)
        };
        self.check_frame(train.first().map(Frame::dims))?;
        let mut trainer = self.trainer.take().unwrap_or_else(|| {
            Trainer::new(OptimizerConfig::new(
                self.config.optimizer,
                self.config.learning_rate,
            ))
        });
        let res = fit(
            self,
            &mut trainer,
            &train_src,
            val_src.as_ref().map(|v| v as &dyn SampleSource<f32>),
            schedule,
        );
        self.trainer = Some(trainer);
        let history = res?;
        if self.config.standardize_latents {
            self.fit_latent_norm(train)?;
        }
        Ok(history)
    }

    fn check_frame(&self, dims: Option<(usize, usize, usize)>) -> Result<()> {
        let s = self.config.input_size;
        match dims {
            Some(d) if d != (s, s, self.config.input_channels) => Err(Error::shape(
                "encoder input",
                format!(
                    "frame {d:?} does not match {s}x{s}x{}",
                    self.config.input_channels
                ),
            )),
            _ => Ok(()),
        }
    }

    fn fit_latent_norm(&mut self, frames: &[Frame]) -> Result<()> {
        self.latent_norm = None;
        let maps = self.encode_batch(frames)?;
        let (c, h, w) = self.config.latent_shape();
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for m in &maps {
            for ch in 0..c {
                for &v in &m.data[ch * h * w..(ch + 1) * h * w] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64).powi(2);
                }
            }
        }
        let n = (maps.len() * h * w) as f64;
        let norm = LatentNorm {
            mean: mean.iter().map(|m| (m / n) as f32).collect(),
            std: sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| ((q / n - (m / n).powi(2)).max(0.0).sqrt().max(1e-6)) as f32)
                .collect(),
        };
        self.latent_norm = Some(norm);
        Ok(())
    }

    /// Eval-mode encoding of one frame.
    pub fn encode(&self, frame: &Frame) -> Result<FeatureMap> {
        Ok(self.encode_batch(std::slice::from_ref(frame))?.remove(0))
    }

    pub fn encode_batch(&self, frames: &[Frame]) -> Result<Vec<FeatureMap>> {
        let (c, h, w) = self.config.latent_shape();
        let s = self.config.input_size;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(INFER_BATCH) {
            for f in chunk {
                self.check_frame(Some(f.dims()))?;
            }
            let chw: Vec<Vec<f32>> = chunk.iter().map(Frame::to_chw).collect();
            let x = stack_chw(
                chw.iter().map(|v| v.as_slice()),
                (self.config.input_channels, s, s),
            )?;
            let mut tape = Tape::new(self.inference_store(), Mode::Eval);
            let xi = tape.input(x);
            let z = self.encoder.forward_on(&mut tape, xi)?;
            let per = c * h * w;
            for item in tape.value(z).data().chunks(per) {
                let mut data = item.to_vec();
                if let Some(n) = &self.latent_norm {
                    for ch in 0..c {
                        data[ch * h * w..(ch + 1) * h * w]
                            .iter_mut()
                            .for_each(|v| *v = (*v - n.mean[ch]) / n.std[ch]);
                    }
                }
                out.push(FeatureMap::new(c, h, w, data)?);
            }
        }
        Ok(out)
    }

    /// Eval-mode reconstruction of one map.
    pub fn decode(&self, map: &FeatureMap) -> Result<Frame> {
        Ok(self.decode_batch(std::slice::from_ref(map))?.remove(0))
    }

    pub fn decode_batch(&self, maps: &[FeatureMap]) -> Result<Vec<Frame>> {
        let shape = self.config.latent_shape();
        let s = self.config.input_size;
        let ch = self.config.input_channels;
        let mut out = Vec::with_capacity(maps.len());
        for chunk in maps.chunks(INFER_BATCH) {
            let mut rows = Vec::with_capacity(chunk.len());
            for m in chunk {
                if m.shape() != shape {
                    return Err(Error::shape(
                        "decoder input",
                        format!("map {:?} does not match bottleneck {shape:?}", m.shape()),
                    ));
                }
                let mut data = m.data.clone();
                if let Some(n) = &self.latent_norm {
                    let plane = shape.1 * shape.2;
                    for c in 0..shape.0 {
                        data[c * plane..(c + 1) * plane]
                            .iter_mut()
                            .for_each(|v| *v = *v * n.std[c] + n.mean[c]);
                    }
                }
                rows.push(data);
            }
            let z = stack_chw(rows.iter().map(|v| v.as_slice()), shape)?;
            let mut tape = Tape::new(self.inference_store(), Mode::Eval);
            let zi = tape.input(z);
            let y = self.decoder.forward_on(&mut tape, zi)?;
            for item in tape.value(y).data().chunks(ch * s * s) {
                out.push(Frame::from_chw(s, s, ch, item)?);
            }
        }
        Ok(out)
    }

    /// Eval-mode `decode(encode(frame))` for a batch.
    pub fn reconstruct(&self, frames: &[Frame]) -> Result<Vec<Frame>> {
        let maps = self.encode_batch(frames)?;
        self.decode_batch(&maps)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut specs = self.encoder.specs();
        specs.extend(self.decoder.specs());
        let t = self.trainer.as_ref();
        let manifest = Manifest {
            model: "autoencoder".into(),
            config: serde_json::to_value(&self.config)?,
            layers: serde_json::to_value(specs)?,
            dtype: String::new(),
            seed: self.seed,
            optimizer: t.map(|t| t.optimizer.clone()),
            epoch: t.map_or(0, |t| t.epoch),
            history: t.map(|t| t.history.clone()).unwrap_or_default(),
            params: vec![],
            extra: serde_json::to_value(&self.latent_norm)?,
        };
        checkpoint::save(dir, manifest, &self.store, t.and_then(|t| t.best()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = checkpoint::read_manifest(dir)?;
        if m.model != "autoencoder" {
            return Err(Error::Config(format!(
                "{} holds a {} checkpoint, not an autoencoder",
                dir.display(),
                m.model
            )));
        }
        let config: AutoencoderConfig = serde_json::from_value(m.config.clone())?;
        let mut ae = Self::build(config, m.seed)?;
        let best = checkpoint::restore(dir, &m, &mut ae.store)?;
        ae.latent_norm = serde_json::from_value(m.extra.clone()).unwrap_or(None);
        if let Some(opt) = m.optimizer {
            ae.trainer = Some(Trainer::resume(opt, m.epoch, m.history, best));
        }
        Ok(ae)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(dims: Vec<usize>) -> AutoencoderConfig {
        AutoencoderConfig {
            input_size: 16,
            ..AutoencoderConfig::new(dims, 1)
        }
    }

    fn noise(n: usize, side: usize, seed: u64) -> Vec<Frame> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Frame::new(
                    side,
                    side,
                    1,
                    (0..side * side).map(|_| r.random::<f32>()).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn bottleneck_shapes() {
        assert_eq!(
            AutoencoderConfig::new(vec![64, 128, 256], 1).latent_shape(),
            (256, 8, 8)
        );
        assert_eq!(
            AutoencoderConfig::new(vec![32, 64, 128], 1).latent_shape(),
            (128, 8, 8)
        );
        let bad = AutoencoderConfig {
            input_size: 20,
            ..AutoencoderConfig::new(vec![8, 8, 8], 1)
        };
        assert!(matches!(Autoencoder::build(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn full_size_shape_law() {
        let ae = Autoencoder::build(AutoencoderConfig::new(vec![64, 128, 256], 1), 0).unwrap();
        let f = Frame::filled(64, 64, 1, 0.0);
        let z = ae.encode(&f).unwrap();
        assert_eq!(z.shape(), (256, 8, 8));
        assert!(z.data.iter().all(|v| v.is_finite()));
        let y = ae.decode(&z).unwrap();
        assert_eq!(y.dims(), (64, 64, 1));
        let zero = ae
            .decode(&FeatureMap::new(256, 8, 8, vec![0.0; 256 * 64]).unwrap())
            .unwrap();
        assert!(zero.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn untrained_output_in_unit_range_and_deterministic() {
        let ae = Autoencoder::build(small(vec![4, 8]), 3).unwrap();
        let frames = noise(3, 16, 1);
        let a = ae.reconstruct(&frames).unwrap();
        assert!(a
            .iter()
            .flat_map(|f| &f.data)
            .all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(
            ae.encode(&frames[0]).unwrap(),
            ae.encode(&frames[0]).unwrap()
        );
        assert!(matches!(
            ae.encode(&Frame::filled(8, 8, 1, 0.0)),
            Err(Error::Shape { .. })
        ));
        assert!(ae
            .decode(&FeatureMap::new(4, 4, 4, vec![0.0; 64]).unwrap())
            .is_err());
    }

    #[test]
    fn memorizes_a_single_frame() {
        let mut ae = Autoencoder::build(
            AutoencoderConfig {
                loss: LossKind::Mse,
                learning_rate: 3e-3,
                ..small(vec![16, 32])
            },
            5,
        )
        .unwrap();
        let frame = noise(1, 16, 9).remove(0);
        // Batch norm over a batch of one standardizes away all content, so the
        // single frame is repeated to fill a batch.
        let frames = vec![frame.clone(); 4];
        let schedule = Schedule {
            batch_size: 4,
            max_epochs: 200,
            patience: None,
            max_steps: Some(200),
            seed: 0,
        };
        ae.train(&frames, &[], &schedule).unwrap();
        let rec = ae.reconstruct(&frames).unwrap();
        let mse = crate::metrics::mse(&rec[0].data, &frame.data).unwrap();
        assert!(mse < 1e-4, "reconstruction MSE {mse}");
    }

    #[test]
    fn checkpoint_round_trip_and_determinism() {
        let frames = noise(12, 16, 2);
        let schedule = Schedule {
            batch_size: 4,
            max_epochs: 2,
            patience: None,
            max_steps: None,
            seed: 1,
        };
        let run = || {
            let mut ae = Autoencoder::build(small(vec![4, 8]), 7).unwrap();
            let h = ae.train(&frames[..8], &frames[8..], &schedule).unwrap();
            (ae, h)
        };
        let (ae, h1) = run();
        let (_, h2) = run();
        assert_eq!(h1, h2);
        let dir = tempfile::tempdir().unwrap();
        ae.save(dir.path()).unwrap();
        let back = Autoencoder::load(dir.path()).unwrap();
        assert_eq!(
            ae.encode(&frames[0]).unwrap(),
            back.encode(&frames[0]).unwrap()
        );
        assert_eq!(back.history(), ae.history());
    }

    #[test]
    fn latent_standardization_round_trips() {
        let frames = noise(8, 16, 4);
        let mut ae = Autoencoder::build(
            AutoencoderConfig {
                standardize_latents: true,
                ..small(vec![4, 8])
            },
            1,
        )
        .unwrap();
        let plain = ae.reconstruct(&frames).unwrap();
        let schedule = Schedule {
            batch_size: 8,
            max_epochs: 1,
            max_steps: Some(0),
            ..Default::default()
        };
        ae.train(&frames, &[], &schedule).unwrap();
        assert!(ae.latent_norm().is_some());
        let normed = ae.reconstruct(&frames).unwrap();
        for (a, b) in plain.iter().zip(&normed) {
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| (x - y).abs() < 1e-5));
        }
    }
}
