use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::he_normal;
use super::tape::{Mode, NodeId, Tape};
use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.9;

/// Declarative description of one layer. Shapes exclude the batch axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    ElmanCell {
        input_size: usize,
        hidden_size: usize,
    },
    LstmCell {
        input_size: usize,
        hidden_size: usize,
    },
    GruCell {
        input_size: usize,
        hidden_size: usize,
    },
    ConvLstmCell {
        in_channels: usize,
        hidden_channels: usize,
        kernel: usize,
    },
    Norm {
        channels: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::ConvTranspose2d { .. } => "ConvTranspose2d",
            LayerSpec::Conv3d { .. } => "Conv3d",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::ElmanCell { .. } => "ElmanCell",
            LayerSpec::LstmCell { .. } => "LstmCell",
            LayerSpec::GruCell { .. } => "GruCell",
            LayerSpec::ConvLstmCell { .. } => "ConvLstmCell",
            LayerSpec::Norm { .. } => "Norm",
            LayerSpec::LeakyRelu { .. } => "LeakyRelu",
            LayerSpec::Sigmoid => "Sigmoid",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Reshape { .. } => "Reshape",
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(
            self,
            LayerSpec::ElmanCell { .. }
                | LayerSpec::LstmCell { .. }
                | LayerSpec::GruCell { .. }
                | LayerSpec::ConvLstmCell { .. }
        )
    }

    /// Number of gate blocks stacked in a recurrent cell's weights.
    fn gates(&self) -> usize {
        match self {
            LayerSpec::LstmCell { .. } | LayerSpec::ConvLstmCell { .. } => 4,
            LayerSpec::GruCell { .. } => 3,
            _ => 1,
        }
    }

    /// Output shape (without batch) for a given input shape. Recurrent cells
    /// report the shape of their hidden state.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| Err(Error::shape(self.name(), detail));
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return bad(format!("expected [{in_channels}, h, w], got {input:?}"));
                }
                let dim = |d: usize| {
                    (d + 2 * padding)
                        .checked_sub(*kernel)
                        .map(|v| v / stride + 1)
                };
                match (dim(input[1]), dim(input[2])) {
                    (Some(h), Some(w)) => Ok(vec![*out_channels, h, w]),
                    _ => bad(format!(
                        "kernel {kernel} larger than padded input {input:?}"
                    )),
                }
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return bad(format!("expected [{in_channels}, h, w], got {input:?}"));
                }
                let dim = |d: usize| {
                    ((d - 1) * stride + kernel + output_padding).checked_sub(2 * padding)
                };
                match (dim(input[1].max(1)), dim(input[2].max(1))) {
                    (Some(h), Some(w)) if h > 0 && w > 0 => Ok(vec![*out_channels, h, w]),
                    _ => bad(format!("invalid transpose geometry for {input:?}")),
                }
            }
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 4 || input[0] != *in_channels {
                    return bad(format!("expected [{in_channels}, d, h, w], got {input:?}"));
                }
                let mut out = vec![*out_channels];
                for a in 0..3 {
                    match (input[a + 1] + 2 * padding[a]).checked_sub(kernel[a]) {
                        Some(v) => out.push(v / stride[a] + 1),
                        None => {
                            return bad(format!(
                                "kernel {kernel:?} larger than padded input {input:?}"
                            ))
                        }
                    }
                }
                Ok(out)
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input != [*in_features] {
                    return bad(format!("expected [{in_features}], got {input:?}"));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::ElmanCell {
                input_size,
                hidden_size,
            }
            | LayerSpec::LstmCell {
                input_size,
                hidden_size,
            }
            | LayerSpec::GruCell {
                input_size,
                hidden_size,
            } => {
                if input != [*input_size] {
                    return bad(format!("expected [{input_size}], got {input:?}"));
                }
                Ok(vec![*hidden_size])
            }
            LayerSpec::ConvLstmCell {
                in_channels,
                hidden_channels,
                ..
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return bad(format!("expected [{in_channels}, h, w], got {input:?}"));
                }
                Ok(vec![*hidden_channels, input[1], input[2]])
            }
            LayerSpec::Norm { channels } => {
                if input.is_empty() || input[0] != *channels {
                    return bad(format!("expected {channels} channels, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return bad(format!("cannot reshape {input:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
        }
    }
}

/// Hidden state of a recurrent cell: `h`, plus the cell state `c` for LSTM variants.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

/// A layer with its parameters registered in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<ParamId>,
    /// Running mean/variance buffers for normalization layers.
    pub buffers: Vec<ParamId>,
}

impl Layer {
    /// Registers the layer's parameters under `prefix`, He-initialized with `slope`.
    pub fn build<T: Float, R: Rng + ?Sized>(
        spec: LayerSpec,
        prefix: &str,
        slope: f64,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let weight = |store: &mut ParamStore<T>,
                      name: &str,
                      shape: Vec<usize>,
                      fan_in: usize,
                      rng: &mut R| {
            store.add_param(
                format!("{prefix}.{name}"),
                he_normal(shape, fan_in, slope, rng),
            )
        };
        match &spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                params.push(weight(
                    store,
                    "weight",
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    fan_in,
                    rng,
                ));
                params.push(
                    store.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![*out_channels])),
                );
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                params.push(weight(
                    store,
                    "weight",
                    vec![*in_channels, *out_channels, *kernel, *kernel],
                    fan_in,
                    rng,
                ));
                params.push(
                    store.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![*out_channels])),
                );
            }
            LayerSpec::Conv3d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel.iter().product::<usize>();
                let mut shape = vec![*out_channels, *in_channels];
                shape.extend_from_slice(kernel);
                params.push(weight(store, "weight", shape, fan_in, rng));
                params.push(
                    store.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![*out_channels])),
                );
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                params.push(weight(
                    store,
                    "weight",
                    vec![*out_features, *in_features],
                    *in_features,
                    rng,
                ));
                params.push(
                    store.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![*out_features])),
                );
            }
            LayerSpec::ElmanCell {
                input_size,
                hidden_size,
            }
            | LayerSpec::LstmCell {
                input_size,
                hidden_size,
            }
            | LayerSpec::GruCell {
                input_size,
                hidden_size,
            } => {
                let g = spec.gates() * hidden_size;
                params.push(weight(
                    store,
                    "weight_ih",
                    vec![g, *input_size],
                    *input_size,
                    rng,
                ));
                params.push(weight(
                    store,
                    "weight_hh",
                    vec![g, *hidden_size],
                    *hidden_size,
                    rng,
                ));
                params.push(store.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![g])));
            }
            LayerSpec::ConvLstmCell {
                in_channels,
                hidden_channels,
                kernel,
            } => {
                let cin = in_channels + hidden_channels;
                params.push(weight(
                    store,
                    "weight",
                    vec![4 * hidden_channels, cin, *kernel, *kernel],
                    cin * kernel * kernel,
                    rng,
                ));
                params.push(store.add_param(
                    format!("{prefix}.bias"),
                    Tensor::zeros(vec![4 * hidden_channels]),
                ));
            }
            LayerSpec::Norm { channels } => {
                params.push(store.add_param(
                    format!("{prefix}.scale"),
                    Tensor::full(vec![*channels], T::one()),
                ));
                params.push(
                    store.add_param(format!("{prefix}.shift"), Tensor::zeros(vec![*channels])),
                );
                buffers.push(store.add_buffer(
                    format!("{prefix}.running_mean"),
                    Tensor::zeros(vec![*channels]),
                ));
                buffers.push(store.add_buffer(
                    format!("{prefix}.running_var"),
                    Tensor::full(vec![*channels], T::one()),
                ));
            }
            LayerSpec::LeakyRelu { .. }
            | LayerSpec::Sigmoid
            | LayerSpec::Flatten
            | LayerSpec::Reshape { .. } => {}
        }
        Self {
            spec,
            params,
            buffers,
        }
    }

    fn check_input<T: Float>(&self, tape: &Tape<T>, x: NodeId, index: usize) -> Result<()> {
        let shape = tape.shape(x);
        if shape.is_empty() {
            return Err(Error::shape(
                format!("layer {index} ({})", self.spec.name()),
                "scalar input",
            ));
        }
        self.spec
            .output_shape(&shape[1..])
            .map(|_| ())
            .map_err(|e| match e {
                Error::Shape { detail, .. } => {
                    Error::shape(format!("layer {index} ({})", self.spec.name()), detail)
                }
                other => other,
            })
    }

    /// Feed-forward application. Recurrent cells must go through [`Layer::step`].
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        self.forward_indexed(tape, x, 0)
    }

    pub(crate) fn forward_indexed<T: Float>(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        index: usize,
    ) -> Result<NodeId> {
        self.check_input(tape, x, index)?;
        match &self.spec {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let (w, b) = (tape.param(self.params[0]), tape.param(self.params[1]));
                tape.conv(
                    x,
                    w,
                    Some(b),
                    [1, *stride, *stride],
                    [0, *padding, *padding],
                )
            }
            LayerSpec::ConvTranspose2d {
                stride,
                padding,
                output_padding,
                ..
            } => {
                let (w, b) = (tape.param(self.params[0]), tape.param(self.params[1]));
                tape.conv_transpose(
                    x,
                    w,
                    Some(b),
                    [1, *stride, *stride],
                    [0, *padding, *padding],
                    [0, *output_padding, *output_padding],
                )
            }
            LayerSpec::Conv3d {
                stride, padding, ..
            } => {
                let (w, b) = (tape.param(self.params[0]), tape.param(self.params[1]));
                tape.conv(x, w, Some(b), *stride, *padding)
            }
            LayerSpec::Dense { .. } => {
                let (w, b) = (tape.param(self.params[0]), tape.param(self.params[1]));
                tape.linear(x, w, Some(b))
            }
            LayerSpec::Norm { .. } => {
                let (g, b) = (tape.param(self.params[0]), tape.param(self.params[1]));
                tape.batch_norm(
                    x,
                    g,
                    b,
                    self.buffers[0],
                    self.buffers[1],
                    NORM_EPS,
                    NORM_MOMENTUM,
                )
            }
            LayerSpec::LeakyRelu { slope } => Ok(tape.leaky_relu(x, T::of(*slope))),
            LayerSpec::Sigmoid => Ok(tape.sigmoid(x)),
            LayerSpec::Flatten => {
                let s = tape.shape(x);
                let shape = vec![s[0], s[1..].iter().product()];
                tape.reshape(x, shape)
            }
            LayerSpec::Reshape { shape } => {
                let mut full = vec![tape.shape(x)[0]];
                full.extend_from_slice(shape);
                tape.reshape(x, full)
            }
            _ => Err(Error::State(format!(
                "{} is recurrent; use step()",
                self.spec.name()
            ))),
        }
    }

    /// Zero initial state for a batch, shaped after `x` (one timestep of input).
    pub fn zero_state<T: Float>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<CellState> {
        let xs = tape.shape(x).to_vec();
        let shape = match &self.spec {
            LayerSpec::ElmanCell { hidden_size, .. }
            | LayerSpec::LstmCell { hidden_size, .. }
            | LayerSpec::GruCell { hidden_size, .. } => {
                vec![xs[0], *hidden_size]
            }
            LayerSpec::ConvLstmCell {
                hidden_channels, ..
            } => {
                if xs.len() != 4 {
                    return Err(Error::shape(
                        "ConvLstmCell",
                        format!("expected [n, c, h, w], got {xs:?}"),
                    ));
                }
                vec![xs[0], *hidden_channels, xs[2], xs[3]]
            }
            _ => {
                return Err(Error::State(format!(
                    "{} has no recurrent state",
                    self.spec.name()
                )))
            }
        };
        let h = tape.input(Tensor::zeros(shape.clone()));
        let c = match self.spec {
            LayerSpec::LstmCell { .. } | LayerSpec::ConvLstmCell { .. } => {
                Some(tape.input(Tensor::zeros(shape)))
            }
            _ => None,
        };
        Ok(CellState { h, c })
    }

    /// One recurrent timestep.
    pub fn step<T: Float>(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        state: CellState,
    ) -> Result<CellState> {
        self.check_input(tape, x, 0)?;
        let name = self.spec.name();
        match &self.spec {
            LayerSpec::ElmanCell { .. } => {
                let (wi, wh, b) = (
                    tape.param(self.params[0]),
                    tape.param(self.params[1]),
                    tape.param(self.params[2]),
                );
                let a = tape.linear(x, wi, Some(b))?;
                let r = tape.linear(state.h, wh, None)?;
                let pre = tape.add(a, r)?;
                Ok(CellState {
                    h: tape.tanh(pre),
                    c: None,
                })
            }
            LayerSpec::LstmCell { hidden_size, .. } => {
                let n = *hidden_size;
                let (wi, wh, b) = (
                    tape.param(self.params[0]),
                    tape.param(self.params[1]),
                    tape.param(self.params[2]),
                );
                let a = tape.linear(x, wi, Some(b))?;
                let r = tape.linear(state.h, wh, None)?;
                let gates = tape.add(a, r)?;
                let c_prev = state
                    .c
                    .ok_or_else(|| Error::State(format!("{name} needs a cell state")))?;
                lstm_update(tape, gates, c_prev, 1, n)
            }
            LayerSpec::GruCell { hidden_size, .. } => {
                let n = *hidden_size;
                let (wi, wh, b) = (
                    tape.param(self.params[0]),
                    tape.param(self.params[1]),
                    tape.param(self.params[2]),
                );
                let gx = tape.linear(x, wi, Some(b))?;
                let gh = tape.linear(state.h, wh, None)?;
                let (xr, xz, xn) = (
                    tape.slice(gx, 1, 0, n)?,
                    tape.slice(gx, 1, n, n)?,
                    tape.slice(gx, 1, 2 * n, n)?,
                );
                let (hr, hz, hn) = (
                    tape.slice(gh, 1, 0, n)?,
                    tape.slice(gh, 1, n, n)?,
                    tape.slice(gh, 1, 2 * n, n)?,
                );
                let r_pre = tape.add(xr, hr)?;
                let r = tape.sigmoid(r_pre);
                let z_pre = tape.add(xz, hz)?;
                let z = tape.sigmoid(z_pre);
                let gated = tape.mul(r, hn)?;
                let n_pre = tape.add(xn, gated)?;
                let cand = tape.tanh(n_pre);
                // h' = (1 - z)·n + z·h = n + z·(h - n)
                let diff = tape.sub(state.h, cand)?;
                let mix = tape.mul(z, diff)?;
                Ok(CellState {
                    h: tape.add(cand, mix)?,
                    c: None,
                })
            }
            LayerSpec::ConvLstmCell {
                hidden_channels,
                kernel,
                ..
            } => {
                let (w, b) = (tape.param(self.params[0]), tape.param(self.params[1]));
                let joined = tape.concat(&[x, state.h], 1)?;
                let pad = kernel / 2;
                let gates = tape.conv(joined, w, Some(b), [1, 1, 1], [0, pad, pad])?;
                let c_prev = state
                    .c
                    .ok_or_else(|| Error::State(format!("{name} needs a cell state")))?;
                lstm_update(tape, gates, c_prev, 1, *hidden_channels)
            }
            _ => Err(Error::State(format!("{name} is not recurrent"))),
        }
    }
}

/// Gate arithmetic shared by LSTM and ConvLSTM: input, forget, candidate and
/// output blocks of width `n` along `axis`.
fn lstm_update<T: Float>(
    tape: &mut Tape<T>,
    gates: NodeId,
    c_prev: NodeId,
    axis: usize,
    n: usize,
) -> Result<CellState> {
    let i_pre = tape.slice(gates, axis, 0, n)?;
    let f_pre = tape.slice(gates, axis, n, n)?;
    let g_pre = tape.slice(gates, axis, 2 * n, n)?;
    let o_pre = tape.slice(gates, axis, 3 * n, n)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let ct = tape.tanh(c);
    let h = tape.mul(o, ct)?;
    Ok(CellState { h, c: Some(c) })
}

/// Ordered stack of feed-forward layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn build<T: Float, R: Rng + ?Sized>(
        specs: Vec<LayerSpec>,
        prefix: &str,
        slope: f64,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| Layer::build(s, &format!("{prefix}.{i}"), slope, store, rng))
            .collect();
        Self { layers }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Output shape (without batch) for an input shape, checking every layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            shape = l.spec.output_shape(&shape).map_err(|e| match e {
                Error::Shape { detail, .. } => {
                    Error::shape(format!("layer {i} ({})", l.spec.name()), detail)
                }
                other => other,
            })?;
        }
        Ok(shape)
    }

    pub fn forward_on<T: Float>(&self, tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
        self.layers
            .iter()
            .enumerate()
            .try_fold(x, |h, (i, l)| l.forward_indexed(tape, h, i))
    }

    /// Runs a fresh forward pass and returns the output node with its tape.
    pub fn forward<'s, T: Float>(
        &self,
        store: &'s ParamStore<T>,
        input: Tensor<T>,
        mode: Mode,
    ) -> Result<(NodeId, Tape<'s, T>)> {
        let mut tape = Tape::new(store, mode);
        let x = tape.input(input);
        let y = self.forward_on(&mut tape, x)?;
        Ok((y, tape))
    }
}
