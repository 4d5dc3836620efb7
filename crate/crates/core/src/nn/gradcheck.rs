//! Central finite-difference verification of tape gradients in 64-bit.

use super::tape::{Mode, NodeId, Tape};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name and coordinate of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn coordinates(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    // Evenly spread, deterministic subset that always includes both ends.
    (0..limit).map(|i| i * (len - 1) / (limit - 1)).collect()
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every trainable parameter and every input.
///
/// At most `max_coords` coordinates are probed per array.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
    max_coords: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new(store, Mode::Train);
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let root = f(&mut tape, &ids)?;
        Ok(tape.value(root).data()[0])
    };

    let mut tape = Tape::new(store, Mode::Train);
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.input_with_grad(t.clone()))
        .collect();
    let root = f(&mut tape, &ids)?;
    if tape.value(root).len() != 1 {
        return Err(Error::State(
            "gradient check needs a scalar function".into(),
        ));
    }
    let grads = tape.backward(root)?;
    let param_grads: Vec<(super::ParamId, Vec<f64>)> =
        grads.params().map(|(p, g)| (p, g.to_vec())).collect();
    let input_grads: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .get(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: String, analytic: f64, numeric: f64| {
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = format!("{name} (analytic {analytic:.3e}, numeric {numeric:.3e})");
        }
    };

    let mut probe = store.clone();
    for (pid, analytic) in &param_grads {
        let name = store.entry(*pid).name.clone();
        for i in coordinates(analytic.len(), max_coords) {
            let orig = probe.entry(*pid).value.data()[i];
            probe.entry_mut(*pid).value.data_mut()[i] = orig + eps;
            let up = eval(&probe, inputs)?;
            probe.entry_mut(*pid).value.data_mut()[i] = orig - eps;
            let down = eval(&probe, inputs)?;
            probe.entry_mut(*pid).value.data_mut()[i] = orig;
            record(
                format!("{name}[{i}]"),
                analytic[i],
                (up - down) / (2.0 * eps),
            );
        }
    }
    let mut shifted = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in coordinates(analytic.len(), max_coords) {
            let orig = shifted[k].data()[i];
            shifted[k].data_mut()[i] = orig + eps;
            let up = eval(store, &shifted)?;
            shifted[k].data_mut()[i] = orig - eps;
            let down = eval(store, &shifted)?;
            shifted[k].data_mut()[i] = orig;
            record(
                format!("input{k}[{i}]"),
                analytic[i],
                (up - down) / (2.0 * eps),
            );
        }
    }
    Ok(report)
}
