use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Float;
use crate::error::{Error, Result};

/// The four candidate training losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    Mse,
    Msle,
    Rmse,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::L1, LossKind::Mse, LossKind::Msle, LossKind::Rmse];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
            LossKind::Msle => "msle",
            LossKind::Rmse => "rmse",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "mae" => Ok(LossKind::L1),
            "mse" => Ok(LossKind::Mse),
            "msle" => Ok(LossKind::Msle),
            "rmse" => Ok(LossKind::Rmse),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

fn check(pred_len: usize, target_len: usize) -> Result<()> {
    if pred_len != target_len || pred_len == 0 {
        return Err(Error::shape(
            "loss",
            format!("prediction has {pred_len} values, target has {target_len}"),
        ));
    }
    Ok(())
}

// MSLE operands are clamped at zero so latent targets stay inside the log's domain.
fn log1p_clamped<T: Float>(x: T) -> T {
    x.max(T::zero()).ln_1p()
}

/// Mean-reduced loss between two equally sized arrays.
pub fn loss<T: Float>(kind: LossKind, pred: &[T], target: &[T]) -> Result<T> {
    check(pred.len(), target.len())?;
    let n = T::of(pred.len() as f64);
    let pairs = pred.iter().zip(target);
    let value = match kind {
        LossKind::L1 => pairs.map(|(&p, &t)| (p - t).abs()).sum::<T>() / n,
        LossKind::Mse => pairs.map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n,
        LossKind::Rmse => (pairs.map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n).sqrt(),
        LossKind::Msle => {
            pairs
                .map(|(&p, &t)| {
                    let d = log1p_clamped(p) - log1p_clamped(t);
                    d * d
                })
                .sum::<T>()
                / n
        }
    };
    Ok(value)
}

/// Gradient of [`loss`] with respect to `pred`, scaled by `upstream`.
pub fn loss_grad<T: Float>(
    kind: LossKind,
    pred: &[T],
    target: &[T],
    upstream: T,
    out: &mut [T],
) -> Result<()> {
    check(pred.len(), target.len())?;
    let n = T::of(pred.len() as f64);
    let two = T::of(2.0);
    match kind {
        LossKind::L1 => {
            for ((o, &p), &t) in out.iter_mut().zip(pred).zip(target) {
                let d = p - t;
                let s = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                *o += upstream * s / n;
            }
        }
        LossKind::Mse => {
            for ((o, &p), &t) in out.iter_mut().zip(pred).zip(target) {
                *o += upstream * two * (p - t) / n;
            }
        }
        LossKind::Rmse => {
            let rmse = loss(LossKind::Rmse, pred, target)?;
            if rmse > T::zero() {
                // d sqrt(m)/dp = dm/dp / (2 sqrt(m))
                for ((o, &p), &t) in out.iter_mut().zip(pred).zip(target) {
                    *o += upstream * (p - t) / (n * rmse);
                }
            }
        }
        LossKind::Msle => {
            for ((o, &p), &t) in out.iter_mut().zip(pred).zip(target) {
                if p > T::zero() {
                    let d = log1p_clamped(p) - log1p_clamped(t);
                    *o += upstream * two * d / (n * (T::one() + p));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_arrays_have_zero_loss() {
        let a = [0.3f64, -1.2, 4.0, 0.0];
        for kind in LossKind::ALL {
            assert_eq!(loss(kind, &a, &a).unwrap(), 0.0, "{kind}");
        }
    }

    #[test]
    fn hand_values() {
        let p = [1.0f64, 0.0];
        let t = [0.0f64, 0.0];
        assert!((loss(LossKind::L1, &p, &t).unwrap() - 0.5).abs() < 1e-15);
        assert!((loss(LossKind::Mse, &p, &t).unwrap() - 0.5).abs() < 1e-15);
        assert!((loss(LossKind::Rmse, &p, &t).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((loss(LossKind::Msle, &[e - 1.0], &[0.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(
            loss(LossKind::Mse, &[1.0f64, 2.0], &[1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rmse_gradient_is_mse_gradient_over_twice_rmse() {
        let p = [0.3f64, -0.7, 1.1];
        let t = [0.1f64, 0.2, 0.4];
        let rmse = loss(LossKind::Rmse, &p, &t).unwrap();
        let mut g_rmse = [0.0; 3];
        let mut g_mse = [0.0; 3];
        loss_grad(LossKind::Rmse, &p, &t, 1.0, &mut g_rmse).unwrap();
        loss_grad(LossKind::Mse, &p, &t, 1.0, &mut g_mse).unwrap();
        for (a, b) in g_rmse.iter().zip(&g_mse) {
            assert!((a - b / (2.0 * rmse)).abs() < 1e-14);
        }
    }

    #[test]
    fn msle_clamps_negative_operands() {
        assert_eq!(loss(LossKind::Msle, &[-3.0f64], &[0.0]).unwrap(), 0.0);
        let mut g = [0.0f64];
        loss_grad(LossKind::Msle, &[-3.0], &[1.0], 1.0, &mut g).unwrap();
        assert_eq!(g[0], 0.0);
    }
}
