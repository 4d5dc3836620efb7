//! Stage-two predictors: six spatiotemporal models mapping a window of `k`
//! feature maps to the next map.
//!
//! Windows are batched as `[n, c, k, h, w]`. Recurrent models walk the depth
//! axis one timestep at a time starting from a zero state, so no state leaks
//! between windows.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, Manifest};
use crate::nn::{
    fit, Float, Layer, LayerSpec, LossKind, Mode, NodeId, OptimizerConfig, OptimizerKind,
    ParamStore, SampleSource, Schedule, Tape, Tensor, TrainHistory, Trainable, Trainer,
    DEFAULT_LEAKY_SLOPE,
};

const INFER_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqModelKind {
    Rnn,
    Lstm,
    Gru,
    Cnn3d,
    ConvLstm,
    Crnn,
}

impl SeqModelKind {
    pub const ALL: [SeqModelKind; 6] = [
        Self::Rnn,
        Self::Lstm,
        Self::Gru,
        Self::Cnn3d,
        Self::ConvLstm,
        Self::Crnn,
    ];

    /// Whether the kind stacks a configurable number of recurrent layers.
    pub fn uses_hidden_layers(self) -> bool {
        !matches!(self, Self::Cnn3d | Self::Crnn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rnn => "rnn",
            Self::Lstm => "lstm",
            Self::Gru => "gru",
            Self::Cnn3d => "cnn3d",
            Self::ConvLstm => "convlstm",
            Self::Crnn => "crnn",
        }
    }
}

impl fmt::Display for SeqModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeqModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model kind '{s}'")))
    }
}

/// Output activation: none for latent targets, sigmoid for pixel targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    #[default]
    Linear,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    pub kind: SeqModelKind,
    /// Stacked recurrent layers; `None` for CNN3D and CRNN.
    pub hidden_layers: Option<usize>,
    pub hidden_size: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub window: usize,
    #[serde(default)]
    pub head: OutputHead,
    #[serde(default = "default_slope")]
    pub slope: f64,
}

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

impl SeqModelConfig {
    /// A config with one hidden layer where applicable, MSE and Adam at 1e-3.
    pub fn new(kind: SeqModelKind, hidden_size: usize, window: usize) -> Self {
        Self {
            kind,
            hidden_layers: kind.uses_hidden_layers().then_some(1),
            hidden_size,
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            window,
            head: OutputHead::Linear,
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind.uses_hidden_layers(), self.hidden_layers) {
            (true, Some(1..=3)) | (false, None) => {}
            (true, other) => {
                return Err(Error::Config(format!(
                    "{} needs 1 to 3 hidden layers, got {other:?}",
                    self.kind
                )));
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "{} takes no hidden-layer count",
                    self.kind
                )));
            }
        }
        if self.hidden_size == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        if self.kind == SeqModelKind::Cnn3d && self.window < 3 {
            return Err(Error::Config(format!(
                "cnn3d needs a window of at least 3, got {}",
                self.window
            )));
        }
        OptimizerConfig::new(self.optimizer, self.learning_rate).validate()
    }
}

/// One training example: `window` consecutive maps and the map that follows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub inputs: Vec<FeatureMap>,
    pub target: FeatureMap,
}

/// Sliding windows with stride 1: inputs `t..t+k`, target `t+k`.
pub fn make_windows(seq: &[FeatureMap], k: usize) -> Result<Vec<WindowSample>> {
    if k == 0 || seq.len() <= k {
        return Err(Error::Window {
            len: seq.len(),
            window: k,
        });
    }
    Ok((0..seq.len() - k)
        .map(|t| WindowSample {
            inputs: seq[t..t + k].to_vec(),
            target: seq[t + k].clone(),
        })
        .collect())
}

/// Number of windows a sequence of length `len` yields.
pub fn window_count(len: usize, k: usize) -> Result<usize> {
    if k == 0 || len <= k {
        return Err(Error::Window { len, window: k });
    }
    Ok(len - k)
}

/// Windows over whole sequences without copying maps per sample.
#[derive(Clone, Debug, Default)]
pub struct WindowSet {
    /// Sequence ids, parallel to the stored sequences.
    pub ids: Vec<String>,
    seqs: Vec<Vec<Vec<f32>>>,
    index: Vec<(usize, usize)>,
    shape: (usize, usize, usize),
    window: usize,
}

impl WindowSet {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            ..Default::default()
        }
    }

    pub fn from_sequences(seqs: &[(String, Vec<FeatureMap>)], window: usize) -> Result<Self> {
        let mut set = Self::new(window);
        for (id, maps) in seqs {
            set.push(id.clone(), maps)?;
        }
        Ok(set)
    }

    /// Adds every window of one sequence.
    pub fn push(&mut self, id: String, maps: &[FeatureMap]) -> Result<()> {
        let n = window_count(maps.len(), self.window)?;
        let shape = maps[0].shape();
        if self.seqs.is_empty() {
            self.shape = shape;
        }
        if let Some(m) = maps.iter().find(|m| m.shape() != self.shape) {
            return Err(Error::InconsistentSequence(format!(
                "map {:?} in sequence '{id}' differs from {:?}",
                m.shape(),
                self.shape
            )));
        }
        let s = self.seqs.len();
        self.seqs
            .push(maps.iter().map(|m| m.data.clone()).collect());
        self.ids.push(id);
        self.index.extend((0..n).map(|t| (s, t)));
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn map_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    /// `(sequence position, start)` of every window, in order.
    pub fn positions(&self) -> &[(usize, usize)] {
        &self.index
    }

    /// Id of the sequence window `i` was cut from.
    pub fn source_id(&self, i: usize) -> &str {
        &self.ids[self.index[i].0]
    }

    pub fn target(&self, i: usize) -> FeatureMap {
        let (s, t) = self.index[i];
        let (c, h, w) = self.shape;
        FeatureMap::new(c, h, w, self.seqs[s][t + self.window].clone()).expect("consistent map")
    }

    pub fn sample(&self, i: usize) -> WindowSample {
        let (s, t) = self.index[i];
        let (c, h, w) = self.shape;
        WindowSample {
            inputs: (t..t + self.window)
                .map(|j| FeatureMap::new(c, h, w, self.seqs[s][j].clone()).expect("consistent map"))
                .collect(),
            target: self.target(i),
        }
    }

    fn inputs(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let (c, h, w) = self.shape;
        let k = self.window;
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * c * k * plane);
        for &i in indices {
            let (s, t) = self.index[i];
            for ch in 0..c {
                for j in t..t + k {
                    data.extend_from_slice(&self.seqs[s][j][ch * plane..(ch + 1) * plane]);
                }
            }
        }
        Tensor::new(vec![indices.len(), c, k, h, w], data)
    }
}

impl SampleSource<f32> for WindowSet {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let x = self.inputs(indices)?;
        let (c, h, w) = self.shape;
        let mut y = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            let (s, t) = self.index[i];
            y.extend_from_slice(&self.seqs[s][t + self.window]);
        }
        Ok((x, Tensor::new(vec![indices.len(), c, h, w], y)?))
    }
}

/// Packs windows of maps into one `[n, c, k, h, w]` tensor.
pub fn stack_windows(windows: &[&[FeatureMap]]) -> Result<Tensor<f32>> {
    let first = windows
        .first()
        .and_then(|w| w.first())
        .ok_or_else(|| Error::InsufficientData("no windows".into()))?;
    let (c, h, w) = first.shape();
    let k = windows[0].len();
    let plane = h * w;
    let mut data = Vec::with_capacity(windows.len() * c * k * plane);
    for win in windows {
        if win.len() != k {
            return Err(Error::shape(
                "window",
                format!("expected {k} maps, got {}", win.len()),
            ));
        }
        if let Some(m) = win.iter().find(|m| m.shape() != (c, h, w)) {
            return Err(Error::shape(
                "window",
                format!("map {:?} differs from {:?}", m.shape(), (c, h, w)),
            ));
        }
        for ch in 0..c {
            for m in win.iter() {
                data.extend_from_slice(&m.data[ch * plane..(ch + 1) * plane]);
            }
        }
    }
    Tensor::new(vec![windows.len(), c, k, h, w], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Arch {
    /// Dense projection in, stacked vector cells, dense projection out.
    Vector {
        proj_in: Layer,
        cells: Vec<Layer>,
        proj_out: Layer,
    },
    ConvLstm {
        cells: Vec<Layer>,
        head: Layer,
    },
    Cnn3d {
        first: Layer,
        second: Layer,
    },
    /// Shared per-step convolution, convolutional Elman recurrence, 1×1 head.
    Crnn {
        features: Layer,
        recur: Layer,
        head: Layer,
    },
}

/// Layer wiring of a predictor. Parameters live in a [`ParamStore`] so the
/// same wiring runs in `f32` for training and `f64` for gradient checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqNet {
    arch: Arch,
    head: OutputHead,
    shape: (usize, usize, usize),
    window: usize,
    slope: f64,
}

impl SeqNet {
    pub fn build<T: Float, R: Rng + ?Sized>(
        config: &SeqModelConfig,
        shape: (usize, usize, usize),
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = shape;
        if c * h * w == 0 {
            return Err(Error::Config(format!("empty latent shape {shape:?}")));
        }
        let n = config.hidden_size;
        let s = config.slope;
        let mut layer =
            |spec: LayerSpec, name: &str| Layer::build(spec, &format!("seq.{name}"), s, store, rng);
        let conv = |i: usize, o: usize, k: usize| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: 1,
            padding: k / 2,
        };
        let layers = config.hidden_layers.unwrap_or(0);
        let arch = match config.kind {
            SeqModelKind::Rnn | SeqModelKind::Lstm | SeqModelKind::Gru => {
                let d = c * h * w;
                let proj_in = layer(
                    LayerSpec::Dense {
                        in_features: d,
                        out_features: n,
                    },
                    "proj_in",
                );
                let cells = (0..layers)
                    .map(|i| {
                        let spec = match config.kind {
                            SeqModelKind::Rnn => LayerSpec::ElmanCell {
                                input_size: n,
                                hidden_size: n,
                            },
                            SeqModelKind::Lstm => LayerSpec::LstmCell {
                                input_size: n,
                                hidden_size: n,
                            },
                            _ => LayerSpec::GruCell {
                                input_size: n,
                                hidden_size: n,
                            },
                        };
                        layer(spec, &format!("cell{i}"))
                    })
                    .collect();
                let proj_out = layer(
                    LayerSpec::Dense {
                        in_features: n,
                        out_features: d,
                    },
                    "proj_out",
                );
                Arch::Vector {
                    proj_in,
                    cells,
                    proj_out,
                }
            }
            SeqModelKind::ConvLstm => {
                let cells = (0..layers)
                    .map(|i| {
                        layer(
                            LayerSpec::ConvLstmCell {
                                in_channels: if i == 0 { c } else { n },
                                hidden_channels: n,
                                kernel: 3,
                            },
                            &format!("cell{i}"),
                        )
                    })
                    .collect();
                let head = layer(conv(n, c, 1), "head");
                Arch::ConvLstm { cells, head }
            }
            SeqModelKind::Cnn3d => {
                let k = config.window;
                let first = layer(
                    LayerSpec::Conv3d {
                        in_channels: c,
                        out_channels: n,
                        kernel: [3, 3, 3],
                        stride: [1, 1, 1],
                        padding: [0, 1, 1],
                    },
                    "conv0",
                );
                let second = layer(
                    LayerSpec::Conv3d {
                        in_channels: n,
                        out_channels: c,
                        kernel: [k - 2, 3, 3],
                        stride: [1, 1, 1],
                        padding: [0, 1, 1],
                    },
                    "conv1",
                );
                Arch::Cnn3d { first, second }
            }
            SeqModelKind::Crnn => {
                let features = layer(conv(c, n, 3), "features");
                let recur = layer(conv(2 * n, n, 3), "recur");
                let head = layer(conv(n, c, 1), "head");
                Arch::Crnn {
                    features,
                    recur,
                    head,
                }
            }
        };
        Ok(Self {
            arch,
            head: config.head,
            shape,
            window: config.window,
            slope: config.slope,
        })
    }

    pub fn map_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Layer specs in build order.
    pub fn specs(&self) -> Vec<LayerSpec> {
        let layers: Vec<&Layer> = match &self.arch {
            Arch::Vector {
                proj_in,
                cells,
                proj_out,
            } => std::iter::once(proj_in)
                .chain(cells)
                .chain([proj_out])
                .collect(),
            Arch::ConvLstm { cells, head } => cells.iter().chain([head]).collect(),
            Arch::Cnn3d { first, second } => vec![first, second],
            Arch::Crnn {
                features,
                recur,
                head,
            } => vec![features, recur, head],
        };
        layers.into_iter().map(|l| l.spec.clone()).collect()
    }

    /// Input `x` is `[n, c, k, h, w]`; the output is `[n, c, h, w]`.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.shape;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 5 || xs[1..] != [c, self.window, h, w] {
            return Err(Error::shape(
                "predictor input",
                format!("expected [n, {c}, {}, {h}, {w}], got {xs:?}", self.window),
            ));
        }
        let n = xs[0];
        let step = |tape: &mut Tape<T>, t: usize| -> Result<NodeId> {
            let s = tape.slice(x, 2, t, 1)?;
            tape.reshape(s, vec![n, c, h, w])
        };
        let slope = T::of(self.slope);
        let y = match &self.arch {
            Arch::Vector {
                proj_in,
                cells,
                proj_out,
            } => {
                let mut states = Vec::with_capacity(cells.len());
                for t in 0..self.window {
                    let xt = step(tape, t)?;
                    let flat = tape.reshape(xt, vec![n, c * h * w])?;
                    let mut inp = proj_in.forward(tape, flat)?;
                    for (i, cell) in cells.iter().enumerate() {
                        if states.len() == i {
                            states.push(cell.zero_state(tape, inp)?);
                        }
                        states[i] = cell.step(tape, inp, states[i])?;
                        inp = states[i].h;
                    }
                }
                let last = states.last().expect("at least one cell").h;
                let out = proj_out.forward(tape, last)?;
                tape.reshape(out, vec![n, c, h, w])?
            }
            Arch::ConvLstm { cells, head } => {
                let mut states = Vec::with_capacity(cells.len());
                for t in 0..self.window {
                    let mut inp = step(tape, t)?;
                    for (i, cell) in cells.iter().enumerate() {
                        if states.len() == i {
                            states.push(cell.zero_state(tape, inp)?);
                        }
                        states[i] = cell.step(tape, inp, states[i])?;
                        inp = states[i].h;
                    }
                }
                let last = states.last().expect("at least one cell").h;
                head.forward(tape, last)?
            }
            Arch::Cnn3d { first, second } => {
                let a = first.forward(tape, x)?;
                let a = tape.leaky_relu(a, slope);
                let b = second.forward(tape, a)?;
                tape.reshape(b, vec![n, c, h, w])?
            }
            Arch::Crnn {
                features,
                recur,
                head,
            } => {
                let mut state: Option<NodeId> = None;
                for t in 0..self.window {
                    let xt = step(tape, t)?;
                    let f = features.forward(tape, xt)?;
                    let f = tape.leaky_relu(f, slope);
                    let prev = match state {
                        Some(s) => s,
                        None => {
                            let shape = tape.shape(f).to_vec();
                            tape.input(Tensor::zeros(shape))
                        }
                    };
                    let joined = tape.concat(&[f, prev], 1)?;
                    let pre = recur.forward(tape, joined)?;
                    state = Some(tape.tanh(pre));
                }
                head.forward(tape, state.expect("window is non-empty"))?
            }
        };
        Ok(match self.head {
            OutputHead::Linear => y,
            OutputHead::Sigmoid => tape.sigmoid(y),
        })
    }
}

/// A predictor with its `f32` parameters and training state.
#[derive(Clone, Debug)]
pub struct SeqModel {
    pub config: SeqModelConfig,
    pub seed: u64,
    pub net: SeqNet,
    store: ParamStore<f32>,
    trainer: Option<Trainer<f32>>,
}

impl Trainable<f32> for SeqModel {
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn forward_node(&self, tape: &mut Tape<f32>, input: NodeId) -> Result<NodeId> {
        self.net.forward(tape, input)
    }

    fn loss_kind(&self) -> LossKind {
        self.config.loss
    }
}

impl SeqModel {
    /// Builds the predictor for maps of shape `(channels, height, width)`.
    pub fn build(config: SeqModelConfig, shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = SeqNet::build(&config, shape, &mut store, &mut rng)?;
        Ok(Self {
            config,
            seed,
            net,
            store,
            trainer: None,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Parameter array shapes by name, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .entries()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| (e.name.clone(), e.value.shape().to_vec()))
            .collect()
    }

    pub fn history(&self) -> Option<&TrainHistory> {
        self.trainer.as_ref().map(|t| &t.history)
    }

    /// Best-validation parameters if a validation set was used, else the
    /// current ones.
    pub fn inference_store(&self) -> &ParamStore<f32> {
        self.trainer
            .as_ref()
            .and_then(|t| t.best())
            .unwrap_or(&self.store)
    }

    pub fn train(
        &mut self,
        train: &WindowSet,
        val: Option<&WindowSet>,
        schedule: &Schedule,
    ) -> Result<TrainHistory> {
        for set in std::iter::once(train).chain(val) {
            if set.window() != self.config.window
                || (!set.is_empty() && set.map_shape() != self.net.map_shape())
            {
                return Err(Error::shape(
                    "predictor input",
                    format!(
                        "windows of {} maps {:?} do not match model window {} and shape {:?}",
                        set.window(),
                        set.map_shape(),
                        self.config.window,
                        self.net.map_shape()
                    ),
                ));
            }
        }
        let mut trainer = self.trainer.take().unwrap_or_else(|| {
            Trainer::new(OptimizerConfig::new(
                self.config.optimizer,
                self.config.learning_rate,
            ))
        });
        let res = fit(
            self,
            &mut trainer,
            train,
            val.map(|v| v as &dyn SampleSource<f32>),
            schedule,
        );
        self.trainer = Some(trainer);
        res
    }

    /// Eval-mode prediction for a packed `[n, c, k, h, w]` tensor.
    pub fn predict_tensor(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new(self.inference_store(), Mode::Eval);
        let xi = tape.input(x);
        let y = self.net.forward(&mut tape, xi)?;
        Ok(tape.value(y).clone())
    }

    /// Predicts the map following `inputs` (exactly `window` maps).
    pub fn predict_next(&self, inputs: &[FeatureMap]) -> Result<FeatureMap> {
        if inputs.len() != self.config.window {
            return Err(Error::shape(
                "predictor input",
                format!("expected {} maps, got {}", self.config.window, inputs.len()),
            ));
        }
        let y = self.predict_tensor(stack_windows(&[inputs])?)?;
        let (c, h, w) = self.net.map_shape();
        FeatureMap::new(c, h, w, y.into_data())
    }

    /// Predictions for every window of `set`, in order.
    pub fn predict_set(&self, set: &WindowSet) -> Result<Vec<FeatureMap>> {
        let (c, h, w) = self.net.map_shape();
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(set.len());
        for chunk in idx.chunks(INFER_BATCH) {
            let y = self.predict_tensor(set.inputs(chunk)?)?;
            for item in y.data().chunks(c * h * w) {
                out.push(FeatureMap::new(c, h, w, item.to_vec())?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let t = self.trainer.as_ref();
        let manifest = Manifest {
            model: "seqmodel".into(),
            config: serde_json::to_value(&self.config)?,
            layers: serde_json::to_value(self.net.specs())?,
            dtype: String::new(),
            seed: self.seed,
            optimizer: t.map(|t| t.optimizer.clone()),
            epoch: t.map_or(0, |t| t.epoch),
            history: t.map(|t| t.history.clone()).unwrap_or_default(),
            params: vec![],
            extra: serde_json::to_value(self.net.map_shape())?,
        };
        checkpoint::save(dir, manifest, &self.store, t.and_then(|t| t.best()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = checkpoint::read_manifest(dir)?;
        if m.model != "seqmodel" {
            return Err(Error::Config(format!(
                "{} holds a {} checkpoint, not a predictor",
                dir.display(),
                m.model
            )));
        }
        let config: SeqModelConfig = serde_json::from_value(m.config.clone())?;
        let shape: (usize, usize, usize) = serde_json::from_value(m.extra.clone())?;
        let mut model = Self::build(config, shape, m.seed)?;
        let best = checkpoint::restore(dir, &m, &mut model.store)?;
        if let Some(opt) = m.optimizer {
            model.trainer = Some(Trainer::resume(opt, m.epoch, m.history, best));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use proptest::{prop_assert_eq, prop_assume, proptest};

    fn maps(n: usize, shape: (usize, usize, usize), seed: u64) -> Vec<FeatureMap> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = shape;
        (0..n)
            .map(|_| {
                FeatureMap::new(
                    c,
                    h,
                    w,
                    (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn config(kind: SeqModelKind, window: usize) -> SeqModelConfig {
        SeqModelConfig {
            hidden_layers: kind.uses_hidden_layers().then_some(2),
            ..SeqModelConfig::new(kind, 4, window)
        }
    }

    #[test]
    fn window_counts_match_table_totals() {
        assert_eq!(window_count(20, 5).unwrap() * 119, 1785);
        assert_eq!(window_count(20, 3).unwrap() * 119, 2023);
        let seq = maps(4, (1, 2, 2), 0);
        let w = make_windows(&seq, 3).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].inputs, seq[..3].to_vec());
        assert_eq!(w[0].target, seq[3]);
        assert!(matches!(
            make_windows(&seq, 4),
            Err(Error::Window { len: 4, window: 4 })
        ));
    }

    proptest! {
        #[test]
        fn window_count_identity(t in 2usize..40, k in 1usize..39) {
            prop_assume!(k < t);
            let seq = maps(t, (1, 1, 1), 1);
            prop_assert_eq!(make_windows(&seq, k).unwrap().len(), t - k);
            let set = WindowSet::from_sequences(&[("s".into(), seq)], k).unwrap();
            prop_assert_eq!(set.len(), t - k);
        }
    }

    #[test]
    fn window_set_matches_samples() {
        let seq = maps(6, (2, 2, 3), 2);
        let set = WindowSet::from_sequences(&[("a".into(), seq.clone())], 3).unwrap();
        let samples = make_windows(&seq, 3).unwrap();
        let (x, y) = set.batch(&[0, 1, 2]).unwrap();
        let refs: Vec<&[FeatureMap]> = samples.iter().map(|s| s.inputs.as_slice()).collect();
        assert_eq!(x, stack_windows(&refs).unwrap());
        let targets: Vec<f32> = samples.iter().flat_map(|s| s.target.data.clone()).collect();
        assert_eq!(y.data(), targets.as_slice());
        assert_eq!(set.sample(1), samples[1]);
        assert_eq!(set.source_id(2), "a");
    }

    #[test]
    fn config_invariants() {
        let mut c = SeqModelConfig::new(SeqModelKind::Cnn3d, 8, 5);
        assert!(c.validate().is_ok());
        c.hidden_layers = Some(1);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = SeqModelConfig::new(SeqModelKind::Lstm, 8, 5);
        c.hidden_layers = None;
        assert!(c.validate().is_err());
        c.hidden_layers = Some(4);
        assert!(c.validate().is_err());
        assert!(SeqModelConfig::new(SeqModelKind::Cnn3d, 8, 2)
            .validate()
            .is_err());
        assert_eq!(
            "ConvLSTM".parse::<SeqModelKind>().unwrap(),
            SeqModelKind::ConvLstm
        );
        assert!("transformer".parse::<SeqModelKind>().is_err());
    }

    #[test]
    fn gru_parameter_count_matches_closed_form() {
        let (c, h, w) = (16, 8, 8);
        let n = 128;
        let model =
            SeqModel::build(SeqModelConfig::new(SeqModelKind::Gru, n, 5), (c, h, w), 0).unwrap();
        let d = c * h * w;
        let m = n;
        let projections = (d * n + n) + (n * d + d);
        assert_eq!(model.num_params(), 3 * (n * m + n * n + n) + projections);
        // Enumerate the arrays the count is made of.
        let shapes = model.param_shapes();
        let cell: usize = shapes
            .iter()
            .filter(|(name, _)| name.contains("cell"))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(cell, 3 * (n * m + n * n + n));
        assert_eq!(shapes.len(), 7);
    }

    #[test]
    fn every_kind_preserves_shape() {
        let shape = (3, 4, 5);
        for kind in SeqModelKind::ALL {
            let model = SeqModel::build(config(kind, 3), shape, 1).unwrap();
            let y = model.predict_next(&maps(3, shape, 3)).unwrap();
            assert_eq!(y.shape(), shape, "{kind}");
            assert!(y.data.iter().all(|v| v.is_finite()));
            assert!(model.predict_next(&maps(2, shape, 3)).is_err());
            assert!(model.predict_next(&maps(3, (3, 4, 4), 3)).is_err());
        }
    }

    #[test]
    fn full_scale_shapes() {
        let cfg = SeqModelConfig {
            hidden_layers: Some(2),
            ..SeqModelConfig::new(SeqModelKind::ConvLstm, 256, 3)
        };
        let m = SeqModel::build(cfg, (128, 8, 8), 0).unwrap();
        assert_eq!(
            m.predict_next(&maps(3, (128, 8, 8), 0)).unwrap().shape(),
            (128, 8, 8)
        );
        let m = SeqModel::build(
            SeqModelConfig::new(SeqModelKind::Cnn3d, 256, 5),
            (256, 8, 8),
            0,
        )
        .unwrap();
        assert_eq!(
            m.predict_next(&maps(5, (256, 8, 8), 0)).unwrap().shape(),
            (256, 8, 8)
        );
    }

    #[test]
    fn hidden_state_resets_between_windows() {
        let shape = (2, 3, 3);
        let seq = maps(8, shape, 4);
        let set = WindowSet::from_sequences(&[("s".into(), seq)], 3).unwrap();
        for kind in SeqModelKind::ALL {
            let model = SeqModel::build(config(kind, 3), shape, 2).unwrap();
            let forward = model.predict_set(&set).unwrap();
            let backward: Vec<FeatureMap> = (0..set.len())
                .rev()
                .map(|i| model.predict_next(&set.sample(i).inputs).unwrap())
                .collect();
            for (i, b) in backward.iter().rev().enumerate() {
                assert_eq!(&forward[i], b, "{kind} window {i}");
            }
        }
    }

    #[test]
    fn every_kind_passes_gradient_check() {
        let shape = (2, 4, 4);
        for kind in SeqModelKind::ALL {
            let mut r = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::<f64>::new();
            let net = SeqNet::build(&config(kind, 3), shape, &mut store, &mut r).unwrap();
            let x = Tensor::new(
                vec![2, 2, 3, 4, 4],
                (0..192).map(|_| r.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let target = Tensor::new(
                vec![2, 2, 4, 4],
                (0..64).map(|_| r.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let report = check_gradients(&store, &[x], 1e-4, 30, |tape, ids| {
                let y = net.forward(tape, ids[0])?;
                tape.loss(y, &target, LossKind::Mse)
            })
            .unwrap();
            assert!(report.checked > 0);
            assert!(
                report.max_rel_error < 1e-4,
                "{kind}: {} at {}",
                report.max_rel_error,
                report.worst
            );
        }
    }

    #[test]
    fn memorizes_a_constant_sequence() {
        let shape = (2, 3, 3);
        let m = maps(1, shape, 5).remove(0);
        let seq = vec![m.clone(); 8];
        let set = WindowSet::from_sequences(&[("c".into(), seq)], 3).unwrap();
        let schedule = Schedule {
            batch_size: 5,
            max_epochs: 500,
            patience: None,
            max_steps: Some(500),
            seed: 0,
        };
        for kind in SeqModelKind::ALL {
            let mut model = SeqModel::build(
                SeqModelConfig {
                    learning_rate: 1e-2,
                    ..config(kind, 3)
                },
                shape,
                3,
            )
            .unwrap();
            let h = model.train(&set, None, &schedule).unwrap();
            assert!(
                h.final_train_loss().unwrap() < 1e-3,
                "{kind}: loss {:?}",
                h.final_train_loss()
            );
            let p = model.predict_next(&vec![m.clone(); 3]).unwrap();
            let linf = p
                .data
                .iter()
                .zip(&m.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            assert!(linf < 0.05, "{kind}: L-inf {linf}");
        }
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_reload() {
        let shape = (2, 3, 3);
        let train = WindowSet::from_sequences(
            &[
                ("a".into(), maps(10, shape, 6)),
                ("b".into(), maps(10, shape, 7)),
            ],
            3,
        )
        .unwrap();
        let val = WindowSet::from_sequences(&[("c".into(), maps(6, shape, 8))], 3).unwrap();
        let schedule = Schedule {
            batch_size: 4,
            max_epochs: 3,
            patience: None,
            max_steps: None,
            seed: 9,
        };
        let run = || {
            let mut m = SeqModel::build(config(SeqModelKind::ConvLstm, 3), shape, 4).unwrap();
            let h = m.train(&train, Some(&val), &schedule).unwrap();
            (m, h)
        };
        let (m, h1) = run();
        let (_, h2) = run();
        assert_eq!(h1, h2);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = SeqModel::load(dir.path()).unwrap();
        assert_eq!(
            m.predict_set(&val).unwrap(),
            back.predict_set(&val).unwrap()
        );
        let wrong = WindowSet::from_sequences(&[("d".into(), maps(6, shape, 8))], 4).unwrap();
        let mut m2 = m.clone();
        assert!(matches!(
            m2.train(&wrong, None, &schedule),
            Err(Error::Shape { .. })
        ));
    }
}
