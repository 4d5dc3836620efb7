//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] borrows the parameter store immutably; parameters enter the
//! tape as leaves without being copied. Running-statistic updates produced
//! by batch normalization in training mode are collected on the tape and
//! applied by the caller with [`apply_stat_updates`].

use std::collections::HashMap;

use super::conv::{
    conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, ConvGeometry,
    ConvShape,
};
use super::float::matmul;
use super::loss::{loss, loss_grad, LossKind};
use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Forward-pass mode: training enables batch statistics and gradient bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        shape: ConvShape,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        shape: ConvShape,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        x: NodeId,
        scale: T,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Normalized input (before scale/shift).
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Reshape(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Loss {
        pred: NodeId,
        target: Vec<T>,
        kind: LossKind,
    },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Pending running-statistics update from a training-mode normalization.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean_buffer: ParamId,
    pub var_buffer: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub momentum: f64,
}

/// Recorded forward computation; the cache consumed by [`Tape::backward`].
pub struct Tape<'s, T: Float> {
    store: &'s ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    stat_updates: Vec<StatUpdate<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, node: NodeId) -> Option<&[T]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter touched by the forward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(p, n)| self.grads[n.0].as_deref().map(|g| (p, g)))
    }

    /// Adds all parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (p, g) in self.params() {
            store.accumulate_grad(p, g)?;
        }
        Ok(())
    }
}

fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'s, T: Float> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            params: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.store.value(*p),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        self.mode == Mode::Train && ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        let train = self.mode == Mode::Train;
        self.push(value, Op::Leaf, train)
    }

    /// Leaf for a stored parameter; repeated calls return the same node so
    /// gradients of shared weights accumulate.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let requires_grad = self.mode == Mode::Train && self.store.entry(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    fn spatial(shape: &[usize], layer: &str) -> Result<[usize; 3]> {
        match shape.len() {
            4 => Ok([1, shape[2], shape[3]]),
            5 => Ok([shape[2], shape[3], shape[4]]),
            _ => Err(Error::shape(
                layer,
                format!("expected a 4-D or 5-D input, got {shape:?}"),
            )),
        }
    }

    fn with_spatial(batch: usize, channels: usize, dims: [usize; 3], rank: usize) -> Vec<usize> {
        if rank == 4 {
            vec![batch, channels, dims[1], dims[2]]
        } else {
            vec![batch, channels, dims[0], dims[1], dims[2]]
        }
    }

    /// Convolution. `w` is `[out, in, kh, kw]` for 4-D inputs or
    /// `[out, in, kd, kh, kw]` for 5-D inputs.
    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let input = Self::spatial(&xs, "conv")?;
        if ws.len() != xs.len() || ws[1] != xs[1] {
            return Err(Error::shape(
                "conv",
                format!("weight {ws:?} incompatible with input {xs:?}"),
            ));
        }
        let kernel = if ws.len() == 4 {
            [1, ws[2], ws[3]]
        } else {
            [ws[2], ws[3], ws[4]]
        };
        let geom = ConvGeometry {
            kernel,
            stride,
            padding,
        };
        let output = geom.output_dims(input).ok_or_else(|| {
            Error::shape(
                "conv",
                format!("kernel {kernel:?} does not fit input {xs:?}"),
            )
        })?;
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return Err(Error::shape(
                    "conv",
                    "bias length differs from output channels",
                ));
            }
        }
        let shape = ConvShape {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            input,
            output,
            geom,
        };
        let mut y = Tensor::zeros(Self::with_spatial(xs[0], ws[0], output, xs.len()));
        conv_forward(
            &shape,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            y.data_mut(),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.grad_of(&deps);
        Ok(self.push(y, Op::Conv { x, w, b, shape }, rg))
    }

    /// Transposed convolution. `w` is `[in, out, kh, kw]` (or 5-D).
    pub fn conv_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let input = Self::spatial(&xs, "conv_transpose")?;
        if ws.len() != xs.len() || ws[0] != xs[1] {
            return Err(Error::shape(
                "conv_transpose",
                format!("weight {ws:?} incompatible with input {xs:?}"),
            ));
        }
        let kernel = if ws.len() == 4 {
            [1, ws[2], ws[3]]
        } else {
            [ws[2], ws[3], ws[4]]
        };
        let geom = ConvGeometry {
            kernel,
            stride,
            padding,
        };
        let output = geom
            .transpose_output_dims(input, output_padding)
            .ok_or_else(|| {
                Error::shape(
                    "conv_transpose",
                    format!("invalid geometry for input {xs:?}"),
                )
            })?;
        let shape = ConvShape {
            batch: xs[0],
            in_channels: ws[0],
            out_channels: ws[1],
            input,
            output,
            geom,
        };
        let mut y = Tensor::zeros(Self::with_spatial(xs[0], ws[1], output, xs.len()));
        conv_transpose_forward(
            &shape,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            y.data_mut(),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.grad_of(&deps);
        Ok(self.push(y, Op::ConvTranspose { x, w, b, shape }, rg))
    }

    /// `y = x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut y = Tensor::zeros(vec![n, m]);
        matmul(
            n,
            k,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            y.data_mut(),
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            if bias.len() != m {
                return Err(Error::shape(
                    "linear",
                    "bias length differs from output features",
                ));
            }
            for row in y.data_mut().chunks_mut(m) {
                row.iter_mut().zip(&bias).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.grad_of(&deps);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(y, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let v = self.value(x);
        let y = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| scale * a + shift).collect(),
        )
        .expect("same shape");
        let rg = self.grad_of(&[x]);
        self.push(y, Op::Affine { x, scale }, rg)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.unary(x, sigmoid);
        let rg = self.grad_of(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.unary(x, |a| a.tanh());
        let rg = self.grad_of(&[x]);
        self.push(y, Op::Tanh(x), rg)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let y = self.unary(x, |a| if a > T::zero() { a } else { a * slope });
        let rg = self.grad_of(&[x]);
        self.push(y, Op::LeakyRelu { x, slope }, rg)
    }

    /// Per-channel normalization over every axis except 1. Training mode uses
    /// batch statistics and records a running-statistics update.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(
                "norm",
                format!("expected at least 2 axes, got {xs:?}"),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "norm",
                format!("scale/shift length differs from {c} channels"),
            ));
        }
        let m = n * spatial;
        let eps = T::of(eps);
        let data = self.value(x).data();
        let batch_stats = self.mode == Mode::Train;
        let (mean, var): (Vec<T>, Vec<T>) = if batch_stats {
            if m < 2 {
                return Err(Error::shape(
                    "norm",
                    "batch statistics need at least two values per channel",
                ));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += data[(b * c + ch) * spatial..(b * c + ch + 1) * spatial]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                let mu = s / T::of(m as f64);
                let mut q = T::zero();
                for b in 0..n {
                    for &v in &data[(b * c + ch) * spatial..(b * c + ch + 1) * spatial] {
                        q += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = q / T::of(m as f64);
            }
            (mean, var)
        } else {
            (
                self.store.value(running_mean).data().to_vec(),
                self.store.value(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut y = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    let h = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[ch] * h + bt[ch];
                }
            }
        }
        if batch_stats {
            let unbias = T::of(m as f64 / (m as f64 - 1.0));
            self.stat_updates.push(StatUpdate {
                mean_buffer: running_mean,
                var_buffer: running_var,
                batch_mean: mean,
                batch_var: var.iter().map(|&v| v * unbias).collect(),
                momentum,
            });
        }
        let y = Tensor::new(xs, y)?;
        let rg = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::shape("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {first:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let y = Tensor::new(shape, data)?;
        let rg = self.grad_of(parts);
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, inner) = axis_blocks(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let y = Tensor::new(shape, data)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(y, Op::Slice { x, axis, start }, rg))
    }

    /// Scalar loss node between `pred` and a constant target.
    pub fn loss(&mut self, pred: NodeId, target: &Tensor<T>, kind: LossKind) -> Result<NodeId> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(
                "loss",
                format!(
                    "prediction {:?} vs target {:?}",
                    self.shape(pred),
                    target.shape()
                ),
            ));
        }
        let v = loss(kind, self.value(pred).data(), target.data())?;
        let rg = self.grad_of(&[pred]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Loss {
                pred,
                target: target.data().to_vec(),
                kind,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.mode != Mode::Train {
            return Err(Error::State(
                "backward requires a forward pass recorded in training mode".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(NodeId(i), &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        let mut params: Vec<(ParamId, NodeId)> =
            self.params.iter().map(|(&p, &n)| (p, n)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut [T]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.value(id).len();
        Some(
            grads[id.0]
                .get_or_insert_with(|| vec![T::zero(); n])
                .as_mut_slice(),
        )
    }

    fn propagate(&self, id: NodeId, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = self.value(id).data();
        match &self.nodes[id.0].op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, shape } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.slot(grads, *x).map(|s| s.to_vec());
                let mut dw = self.slot(grads, *w).map(|s| s.to_vec());
                let mut db = b.and_then(|b| self.slot(grads, b).map(|s| s.to_vec()));
                conv_backward(
                    shape,
                    xv,
                    wv,
                    dy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.store_back(grads, *x, dx);
                self.store_back(grads, *w, dw);
                if let Some(b) = b {
                    self.store_back(grads, *b, db);
                }
            }
            Op::ConvTranspose { x, w, b, shape } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.slot(grads, *x).map(|s| s.to_vec());
                let mut dw = self.slot(grads, *w).map(|s| s.to_vec());
                let mut db = b.and_then(|b| self.slot(grads, b).map(|s| s.to_vec()));
                conv_transpose_backward(
                    shape,
                    xv,
                    wv,
                    dy,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.store_back(grads, *x, dx);
                self.store_back(grads, *w, dw);
                if let Some(b) = b {
                    self.store_back(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, k) = (xs[0], xs[1]);
                let m = self.shape(*w)[0];
                if let Some(dx) = self.slot(grads, *x) {
                    // dX[n,k] += dY[n,m] · W[m,k]
                    matmul(n, m, k, dy, false, self.value(*w).data(), false, dx, true);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    // dW[m,k] += dY[n,m]ᵀ · X[n,k]
                    matmul(m, n, k, dy, true, self.value(*x).data(), false, dw, true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in dy.chunks(m) {
                            db.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for t in [a, b] {
                    if let Some(g) = self.slot(grads, *t) {
                        g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.slot(grads, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = self.slot(grads, *b) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = self.slot(grads, *a) {
                    let bv = self.value(*b).data();
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    let av = self.value(*a).data();
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += *scale * d);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        g[i] += dy[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                if let Some(g) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        g[i] += if xv[i] > T::zero() {
                            dy[i]
                        } else {
                            dy[i] * *slope
                        };
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let m = T::of((n * spatial) as f64);
                let gv = self.value(*gamma).data().to_vec();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for i in base..base + spatial {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *gamma) {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = self.slot(grads, *beta) {
                    g.iter_mut().zip(&sum_dy).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = self.slot(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * spatial;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + spatial {
                                g[i] += if *batch_stats {
                                    k * (dy[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.shape(id).to_vec();
                let (outer, inner) = axis_blocks(&shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if let Some(g) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &dy[o * shape[*axis] * inner + offset..][..block];
                            g[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = self.shape(id)[*axis];
                let (outer, inner) = axis_blocks(&xs, *axis);
                if let Some(g) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = (o * xs[*axis] + start) * inner;
                        let src = &dy[o * len * inner..(o + 1) * len * inner];
                        g[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Loss { pred, target, kind } => {
                let pv = self.value(*pred).data();
                if let Some(g) = self.slot(grads, *pred) {
                    loss_grad(*kind, pv, target, dy[0], g).expect("shapes checked at construction");
                }
            }
        }
    }

    fn store_back(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: Option<Vec<T>>) {
        if let Some(g) = g {
            grads[id.0] = Some(g);
        }
    }
}

/// Applies recorded running-statistics updates: `r ← momentum·r + (1 − momentum)·batch`.
pub fn apply_stat_updates<T: Float>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    for u in updates {
        let keep = T::of(u.momentum);
        let take = T::one() - keep;
        for (buf, batch) in [(u.mean_buffer, &u.batch_mean), (u.var_buffer, &u.batch_var)] {
            let v = store.entry_mut(buf).value.data_mut();
            v.iter_mut()
                .zip(batch.iter())
                .for_each(|(r, &b)| *r = keep * *r + take * b);
        }
    }
}
