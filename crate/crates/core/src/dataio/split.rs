//! Sequence-level train/validation/test partitioning.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint id partitions; the unit is a whole sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train_ids
            .iter()
            .chain(&self.val_ids)
            .chain(&self.test_ids)
    }
}

/// `floor(n * fraction)`, tolerant of representation error just below an integer.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction + 1e-9).floor() as usize
}

/// Splits ids into train/validation/test.
///
/// The test partition takes `floor(n * test_fraction)` ids (at least one), so
/// 599 ids at 0.2 give 480 train and 119 test. Validation is then carved from
/// the remainder at `val_fraction` the same way. Each partition keeps the input
/// order; membership is a deterministic function of `seed`.
pub fn split_sequences(
    ids: &[String],
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} must lie in [0, 1)"
        )));
    }
    let n = ids.len();
    if n == 0 {
        return Err(Error::InsufficientData("no sequence ids to split".into()));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != n {
        return Err(Error::Config("sequence ids must be unique".into()));
    }
    let need = if val_fraction > 0.0 { 3 } else { 2 };
    if n < need {
        return Err(Error::InsufficientData(format!(
            "{n} sequences cannot fill {need} partitions"
        )));
    }
    let n_test = fraction_count(n, test_fraction).clamp(1, n - (need - 1));
    let rest = n - n_test;
    let n_val = if val_fraction > 0.0 {
        fraction_count(rest, val_fraction).clamp(1, rest - 1)
    } else {
        0
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut role = vec![0u8; n];
    for &i in &order[..n_test] {
        role[i] = 2;
    }
    for &i in &order[n_test..n_test + n_val] {
        role[i] = 1;
    }
    let pick = |r: u8| -> Vec<String> {
        ids.iter()
            .zip(&role)
            .filter(|(_, &x)| x == r)
            .map(|(id, _)| id.clone())
            .collect()
    };
    Ok(DatasetSplit {
        train_ids: pick(0),
        val_ids: pick(1),
        test_ids: pick(2),
        seed,
    })
}
