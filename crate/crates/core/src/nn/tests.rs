//! Cross-cutting checks: finite-difference gradients for every layer and loss
//! kind, recurrent unrolling, normalization statistics, shape laws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Gradient check of `loss(layer(x), target)` for a single feed-forward layer.
fn check_layer(spec: LayerSpec, input: Vec<usize>, kind: LossKind) -> f64 {
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    let layer = Layer::build(spec, "l", DEFAULT_LEAKY_SLOPE, &mut store, &mut r);
    // Perturb zero-initialized biases and unit scales so every path is exercised.
    for e in store.entries_mut().filter(|e| e.trainable) {
        e.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    let x = random(input.clone(), &mut r);
    let out = layer.spec.output_shape(&input[1..]).unwrap();
    let mut tshape = vec![input[0]];
    tshape.extend(out);
    let target = random(tshape, &mut r);
    let report = check_gradients(&store, &[x], EPS, 40, |tape, ids| {
        let y = layer.forward(tape, ids[0])?;
        tape.loss(y, &target, kind)
    })
    .unwrap();
    assert!(report.checked > 0);
    assert!(
        report.max_rel_error < TOL,
        "{} / {kind}: {} at {}",
        layer.spec.name(),
        report.max_rel_error,
        report.worst
    );
    report.max_rel_error
}

#[test]
fn feed_forward_layers_pass_gradient_check() {
    check_layer(
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        vec![2, 2, 6, 6],
        LossKind::Mse,
    );
    check_layer(
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        vec![1, 2, 4, 5],
        LossKind::Mse,
    );
    check_layer(
        LayerSpec::ConvTranspose2d {
            in_channels: 3,
            out_channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding: 1,
        },
        vec![2, 3, 3, 3],
        LossKind::Mse,
    );
    check_layer(
        LayerSpec::Conv3d {
            in_channels: 2,
            out_channels: 2,
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            padding: [0, 1, 1],
        },
        vec![2, 2, 4, 3, 3],
        LossKind::Mse,
    );
    check_layer(
        LayerSpec::Dense {
            in_features: 5,
            out_features: 4,
        },
        vec![3, 5],
        LossKind::Mse,
    );
    check_layer(
        LayerSpec::Norm { channels: 3 },
        vec![4, 3, 2, 2],
        LossKind::Mse,
    );
    check_layer(LayerSpec::Norm { channels: 3 }, vec![5, 3], LossKind::Mse);
    check_layer(
        LayerSpec::LeakyRelu { slope: 0.1 },
        vec![2, 3, 4],
        LossKind::Mse,
    );
    check_layer(LayerSpec::Sigmoid, vec![2, 6], LossKind::Mse);
    check_layer(LayerSpec::Flatten, vec![2, 2, 3, 2], LossKind::Mse);
    check_layer(
        LayerSpec::Reshape { shape: vec![3, 4] },
        vec![2, 12],
        LossKind::Mse,
    );
}

#[test]
fn every_loss_kind_passes_gradient_check() {
    for kind in LossKind::ALL {
        let spec = LayerSpec::Sigmoid;
        // Sigmoid outputs keep MSLE operands positive and L1 away from its kink.
        check_layer(spec, vec![3, 4], kind);
    }
    // MSLE with a negative prediction exercises the clamp branch.
    let pred = Tensor::new(vec![4], vec![-0.5, 0.2, 0.7, 1.3]).unwrap();
    let target = Tensor::new(vec![4], vec![0.1, 0.0, 0.9, 0.3]).unwrap();
    let store = ParamStore::<f64>::new();
    let report = check_gradients(&store, &[pred], EPS, 10, |tape, ids| {
        tape.loss(ids[0], &target, LossKind::Msle)
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{}", report.worst);
}

/// Unrolls one cell over `steps` timesteps and checks gradients through time.
fn check_cell(spec: LayerSpec, step_shape: Vec<usize>, steps: usize) {
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let cell = Layer::build(spec, "cell", DEFAULT_LEAKY_SLOPE, &mut store, &mut r);
    for e in store.entries_mut().filter(|e| e.trainable) {
        e.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += r.random_range(-0.2..0.2));
    }
    let xs: Vec<Tensor<f64>> = (0..steps)
        .map(|_| random(step_shape.clone(), &mut r))
        .collect();
    let probe = {
        let mut tape = Tape::new(&store, Mode::Eval);
        let x = tape.input(xs[0].clone());
        let s = cell.zero_state(&mut tape, x).unwrap();
        let s = cell.step(&mut tape, x, s).unwrap();
        tape.shape(s.h).to_vec()
    };
    let target = random(probe, &mut r);
    let report = check_gradients(&store, &xs, EPS, 40, |tape, ids| {
        let mut state = cell.zero_state(tape, ids[0])?;
        for &x in ids {
            state = cell.step(tape, x, state)?;
        }
        tape.loss(state.h, &target, LossKind::Mse)
    })
    .unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{}: {} at {}",
        cell.spec.name(),
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn recurrent_cells_pass_gradient_check_through_time() {
    check_cell(
        LayerSpec::ElmanCell {
            input_size: 4,
            hidden_size: 3,
        },
        vec![2, 4],
        3,
    );
    check_cell(
        LayerSpec::LstmCell {
            input_size: 4,
            hidden_size: 3,
        },
        vec![2, 4],
        3,
    );
    check_cell(
        LayerSpec::GruCell {
            input_size: 4,
            hidden_size: 3,
        },
        vec![2, 4],
        3,
    );
    check_cell(
        LayerSpec::ConvLstmCell {
            in_channels: 2,
            hidden_channels: 2,
            kernel: 3,
        },
        vec![1, 2, 3, 3],
        3,
    );
}

#[test]
fn stacked_network_passes_gradient_check() {
    let mut r = rng(3);
    let mut store = ParamStore::<f64>::new();
    let net = Sequential::build(
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Norm { channels: 2 },
            LayerSpec::LeakyRelu { slope: 0.01 },
            LayerSpec::ConvTranspose2d {
                in_channels: 2,
                out_channels: 1,
                kernel: 3,
                stride: 2,
                padding: 1,
                output_padding: 1,
            },
            LayerSpec::Sigmoid,
        ],
        "net",
        0.01,
        &mut store,
        &mut r,
    );
    let x = random(vec![3, 1, 4, 4], &mut r);
    let target = x.clone();
    let report = check_gradients(&store, &[x], EPS, 30, |tape, ids| {
        let y = net.forward_on(tape, ids[0])?;
        tape.loss(y, &target, LossKind::Mse)
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{}", report.worst);
}

#[test]
fn shape_errors_name_the_layer() {
    let mut store = ParamStore::<f32>::new();
    let net = Sequential::build(
        vec![
            LayerSpec::Dense {
                in_features: 4,
                out_features: 3,
            },
            LayerSpec::Dense {
                in_features: 5,
                out_features: 2,
            },
        ],
        "net",
        0.01,
        &mut store,
        &mut rng(0),
    );
    let err = match net.forward(&store, Tensor::zeros(vec![1, 4]), Mode::Eval) {
        Err(e) => e,
        Ok(_) => panic!("mismatched layers accepted"),
    };
    assert!(err.to_string().contains("layer 1 (Dense)"), "{err}");
    assert!(net.output_shape(&[4]).is_err());
}

#[test]
fn conv_shape_laws() {
    let enc = LayerSpec::Conv2d {
        in_channels: 1,
        out_channels: 64,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    assert_eq!(enc.output_shape(&[1, 64, 64]).unwrap(), vec![64, 32, 32]);
    let dec = LayerSpec::ConvTranspose2d {
        in_channels: 256,
        out_channels: 128,
        kernel: 3,
        stride: 2,
        padding: 1,
        output_padding: 1,
    };
    assert_eq!(dec.output_shape(&[256, 8, 8]).unwrap(), vec![128, 16, 16]);
    for k in 1..=4usize {
        for side in [16usize, 32, 48, 64] {
            if side % (1 << k) != 0 {
                continue;
            }
            let mut s = vec![1, side, side];
            for _ in 0..k {
                s = LayerSpec::Conv2d {
                    in_channels: s[0],
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                }
                .output_shape(&s)
                .unwrap();
            }
            assert_eq!(s[1], side >> k);
            for _ in 0..k {
                s = LayerSpec::ConvTranspose2d {
                    in_channels: s[0],
                    out_channels: 1,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    output_padding: 1,
                }
                .output_shape(&s)
                .unwrap();
            }
            assert_eq!(s, vec![1, side, side]);
        }
    }
}

#[test]
fn leaky_relu_values() {
    let store = ParamStore::<f32>::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let x = tape.input(Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap());
    let y = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(y).data(), &[-0.2, 1.0]);
}

#[test]
fn norm_train_mode_standardizes_each_channel() {
    let mut r = rng(8);
    let mut store = ParamStore::<f64>::new();
    let norm = Layer::build(
        LayerSpec::Norm { channels: 3 },
        "n",
        0.01,
        &mut store,
        &mut r,
    );
    let mut x = random(vec![6, 3, 4, 4], &mut r);
    x.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = *v * 5.0 + (i % 7) as f64);
    let mut tape = Tape::new(&store, Mode::Train);
    let xi = tape.input(x);
    let y = norm.forward(&mut tape, xi).unwrap();
    let v = tape.value(y).data().to_vec();
    for c in 0..3 {
        let vals: Vec<f64> = (0..6)
            .flat_map(|n| v[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
    let updates = tape.take_stat_updates();
    assert_eq!(updates.len(), 1);
    apply_stat_updates(&mut store, &updates);
    let rm = store.value(norm.buffers[0]).data();
    assert!(rm.iter().any(|m| m.abs() > 1e-3));
}

#[test]
fn zero_input_linear_network_has_zero_gradients() {
    let mut store = ParamStore::<f64>::new();
    let net = Sequential::build(
        vec![
            LayerSpec::Dense {
                in_features: 3,
                out_features: 4,
            },
            LayerSpec::Dense {
                in_features: 4,
                out_features: 2,
            },
        ],
        "lin",
        0.0,
        &mut store,
        &mut rng(1),
    );
    let (y, tape) = net
        .forward(&store, Tensor::zeros(vec![2, 3]), Mode::Train)
        .unwrap();
    let mut tape = tape;
    let l = tape
        .loss(y, &Tensor::zeros(vec![2, 2]), LossKind::Mse)
        .unwrap();
    let grads = tape.backward(l).unwrap();
    for (_, g) in grads.params() {
        assert!(g.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn backward_requires_train_mode() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let x = tape.input(Tensor::zeros(vec![2]));
    let l = tape
        .loss(x, &Tensor::zeros(vec![2]), LossKind::Mse)
        .unwrap();
    assert!(matches!(tape.backward(l), Err(crate::Error::State(_))));
}

#[test]
fn he_variance_matches_leaky_gain() {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for seed in 0..10 {
        let mut store = ParamStore::<f32>::new();
        let l = Layer::build(
            LayerSpec::Dense {
                in_features: 1000,
                out_features: 1000,
            },
            "d",
            0.01,
            &mut store,
            &mut rng(seed),
        );
        for &w in store.value(l.params[0]).data() {
            sum += w as f64;
            sq += (w as f64) * (w as f64);
            n += 1;
        }
        assert!(store.value(l.params[1]).data().iter().all(|b| *b == 0.0));
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let expected = 2.0 / (1.0001 * 1000.0);
    assert!(
        (var / expected - 1.0).abs() < 0.05,
        "variance {var} vs {expected}"
    );
}

/// Toy model used to exercise the training loop.
struct Mlp {
    store: ParamStore<f32>,
    net: Sequential,
    kind: LossKind,
}

impl Mlp {
    fn new(seed: u64, kind: LossKind) -> Self {
        let mut store = ParamStore::new();
        let net = Sequential::build(
            vec![
                LayerSpec::Dense {
                    in_features: 3,
                    out_features: 8,
                },
                LayerSpec::LeakyRelu { slope: 0.01 },
                LayerSpec::Dense {
                    in_features: 8,
                    out_features: 2,
                },
            ],
            "mlp",
            0.01,
            &mut store,
            &mut rng(seed),
        );
        Self { store, net, kind }
    }
}

impl Trainable<f32> for Mlp {
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn forward_node(&self, tape: &mut Tape<f32>, input: NodeId) -> crate::Result<NodeId> {
        self.net.forward_on(tape, input)
    }

    fn loss_kind(&self) -> LossKind {
        self.kind
    }
}

struct Pairs(Vec<([f32; 3], [f32; 2])>);

impl SampleSource<f32> for Pairs {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn batch(&self, idx: &[usize]) -> crate::Result<(Tensor<f32>, Tensor<f32>)> {
        let x = idx.iter().flat_map(|&i| self.0[i].0).collect();
        let y = idx.iter().flat_map(|&i| self.0[i].1).collect();
        Ok((
            Tensor::new(vec![idx.len(), 3], x)?,
            Tensor::new(vec![idx.len(), 2], y)?,
        ))
    }
}

fn toy_data(n: usize) -> Pairs {
    let mut r = rng(99);
    Pairs(
        (0..n)
            .map(|_| {
                let x: [f32; 3] = [
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ];
                (x, [x[0] - 0.5 * x[1], x[2] * x[0]])
            })
            .collect(),
    )
}

fn schedule(epochs: usize) -> Schedule {
    Schedule {
        batch_size: 4,
        max_epochs: epochs,
        patience: None,
        max_steps: None,
        seed: 17,
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let data = toy_data(32);
    let run = || {
        let mut m = Mlp::new(4, LossKind::Mse);
        let mut t = Trainer::new(OptimizerConfig::adam(0.01));
        let h = fit(&mut m, &mut t, &data, None, &schedule(30)).unwrap();
        (
            h,
            m.store
                .entries()
                .map(|(_, e)| e.value.clone())
                .collect::<Vec<_>>(),
        )
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let first = h1.epochs[0].train_loss;
    let last = h1.final_train_loss().unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_resume_is_bitwise() {
    let data = toy_data(20);
    let mut full = Mlp::new(2, LossKind::L1);
    let mut t = Trainer::new(OptimizerConfig::rmsprop(0.005));
    fit(&mut full, &mut t, &data, None, &schedule(6)).unwrap();

    let mut part = Mlp::new(2, LossKind::L1);
    let mut t = Trainer::new(OptimizerConfig::rmsprop(0.005));
    fit(&mut part, &mut t, &data, None, &schedule(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = checkpoint::Manifest {
        model: "mlp".into(),
        config: serde_json::Value::Null,
        layers: serde_json::to_value(part.net.specs()).unwrap(),
        dtype: String::new(),
        seed: 17,
        optimizer: Some(t.optimizer.clone()),
        epoch: t.epoch,
        history: t.history.clone(),
        params: vec![],
        extra: serde_json::Value::Null,
    };
    checkpoint::save(dir.path(), manifest, &part.store, t.best()).unwrap();

    let m = checkpoint::read_manifest(dir.path()).unwrap();
    let mut resumed = Mlp::new(123, LossKind::L1);
    let best = checkpoint::restore(dir.path(), &m, &mut resumed.store).unwrap();
    let mut t = Trainer::resume(m.optimizer.unwrap(), m.epoch, m.history, best);
    fit(&mut resumed, &mut t, &data, None, &schedule(6)).unwrap();
    for ((_, a), (_, b)) in full.store.entries().zip(resumed.store.entries()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn early_stopping_restores_best() {
    let data = toy_data(16);
    let val = toy_data(8);
    let mut m = Mlp::new(1, LossKind::Mse);
    // A huge learning rate makes validation loss worsen quickly.
    let mut t = Trainer::new(OptimizerConfig::adam(3.0));
    let s = Schedule {
        patience: Some(2),
        ..schedule(50)
    };
    let h = fit(&mut m, &mut t, &data, Some(&val), &s).unwrap();
    let best = h.best_val_loss.unwrap();
    assert!(h.epochs.iter().all(|e| e.val_loss.unwrap() >= best));
    if h.stopped_early {
        assert!(h.epochs.len() < 50);
    }
    t.restore_best(&mut m.store).unwrap();
    let again = evaluate_loss(&m, &val, 4).unwrap();
    assert!((again - best).abs() <= 1e-6 * best.max(1.0));
}

#[test]
fn max_steps_caps_updates() {
    let data = toy_data(16);
    let mut m = Mlp::new(0, LossKind::Mse);
    let mut t = Trainer::new(OptimizerConfig::adam(0.01));
    let s = Schedule {
        max_steps: Some(7),
        ..schedule(10)
    };
    fit(&mut m, &mut t, &data, None, &s).unwrap();
    assert_eq!(t.optimizer.step, 7);
}
