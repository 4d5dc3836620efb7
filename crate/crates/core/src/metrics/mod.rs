//! Reconstruction and prediction quality: mean absolute and squared error,
//! windowed SSIM, Gaussian KL divergence of latent activations, and
//! four-band interval analysis.

mod intervals;
mod ssim;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Frame;
use crate::error::{Error, Result};

pub use intervals::{bucketize_intervals, Bucket, IntervalReport, BUCKET_LABELS};
pub use ssim::{ssim, ssim_plane, SsimParams};

fn check_pair(name: &str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            name,
            format!("{} vs {} values", a.len(), b.len()),
        ));
    }
    if a.is_empty() {
        return Err(Error::shape(name, "empty arrays"));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(a: &[f32], b: &[f32]) -> Result<f64> {
    check_pair("mae", a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Mean squared error.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    check_pair("mse", a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

/// Per-unit mean and standard deviation of an activation population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Population statistics over `rows`, each holding one value per unit.
    pub fn from_rows<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for row in rows {
            if n == 0 {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
            } else if row.len() != sum.len() {
                return Err(Error::shape(
                    "latent stats",
                    format!("row of {} units, expected {}", row.len(), sum.len()),
                ));
            }
            for (i, &v) in row.iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::InsufficientData(
                "no activations to summarize".into(),
            ));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    /// Units whose spread is zero, for which the log term is undefined.
    pub fn degenerate_units(&self) -> Vec<usize> {
        self.std
            .iter()
            .enumerate()
            .filter(|(_, s)| **s <= 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Divergence of `N(μ, σ²)` from the standard normal, summed over units:
/// `½ Σ (μ² + σ² − ln σ² − 1)`.
pub fn kl_gauss(stats: &LatentStats) -> Result<f64> {
    if stats.mean.len() != stats.std.len() {
        return Err(Error::shape("kl", "mean and std lengths differ"));
    }
    let bad = stats.degenerate_units();
    if !bad.is_empty() {
        return Err(Error::DegenerateStats(format!(
            "{} unit(s) have non-positive spread, first is {}",
            bad.len(),
            bad[0]
        )));
    }
    Ok(0.5
        * stats
            .mean
            .iter()
            .zip(&stats.std)
            .map(|(m, s)| {
                let v = s * s;
                m * m + v - v.ln() - 1.0
            })
            .sum::<f64>())
}

/// Aggregate scores of predicted frames against their ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub mae: f64,
    pub mse: f64,
    pub ssim: f64,
    pub per_frame_ssim: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
}

/// Scores every `(pred, truth)` pair; frames are evaluated in parallel.
pub fn evaluate_frames(
    pred: &[Frame],
    truth: &[Frame],
    params: &SsimParams,
) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} targets", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData("no frames to evaluate".into()));
    }
    let rows: Vec<(f64, f64, f64)> = pred
        .par_iter()
        .zip(truth)
        .map(|(p, t)| {
            Ok((
                mae(&p.data, &t.data)?,
                mse(&p.data, &t.data)?,
                ssim(p, t, params)?,
            ))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    Ok(MetricReport {
        count: rows.len(),
        mae: rows.iter().map(|r| r.0).sum::<f64>() / n,
        mse: rows.iter().map(|r| r.1).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.2).sum::<f64>() / n,
        per_frame_ssim: rows.iter().map(|r| r.2).collect(),
        kl: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        assert_eq!(mae(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(mse(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(mae(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert!(mae(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn kl_reference_values() {
        let kl = |m: Vec<f64>, s: Vec<f64>| kl_gauss(&LatentStats { mean: m, std: s }).unwrap();
        assert_eq!(kl(vec![0.0; 5], vec![1.0; 5]), 0.0);
        assert!((kl(vec![1.0], vec![1.0]) - 0.5).abs() < 1e-12);
        let expected = 0.5 * (4.0 - 4f64.ln() - 1.0);
        assert!((kl(vec![0.0], vec![2.0]) - expected).abs() < 1e-12);
        assert!((expected - 0.80685).abs() < 1e-5);
        assert!(matches!(
            kl_gauss(&LatentStats {
                mean: vec![0.0],
                std: vec![0.0]
            }),
            Err(Error::DegenerateStats(_))
        ));
    }

    #[test]
    fn population_statistics() {
        let rows: Vec<Vec<f32>> = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = LatentStats::from_rows(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 0.0]);
        assert_eq!(s.degenerate_units(), vec![1]);
    }

    #[test]
    fn evaluate_identical_frames() {
        let f = Frame::new(
            12,
            12,
            1,
            (0..144).map(|i| (i % 13) as f32 / 13.0).collect(),
        )
        .unwrap();
        let r = evaluate_frames(
            &[f.clone(), f.clone()],
            &[f.clone(), f],
            &SsimParams::default(),
        )
        .unwrap();
        assert_eq!((r.count, r.mae, r.mse, r.ssim), (2, 0.0, 0.0, 1.0));
    }

    proptest! {
        #[test]
        fn symmetric_and_jensen(pairs in proptest::collection::vec((0.0f32..1.0, 0.0f32..1.0), 1..64)) {
            let (a, b): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
            let (m1, s1) = (mae(&a, &b).unwrap(), mse(&a, &b).unwrap());
            prop_assert_eq!(m1, mae(&b, &a).unwrap());
            prop_assert_eq!(s1, mse(&b, &a).unwrap());
            prop_assert!(s1 >= m1 * m1 - 1e-15);
        }

        #[test]
        fn kl_is_nonnegative(units in proptest::collection::vec((-3.0f64..3.0, 0.05f64..4.0), 1..20)) {
            let (mean, std): (Vec<f64>, Vec<f64>) = units.into_iter().unzip();
            let kl = kl_gauss(&LatentStats { mean, std }).unwrap();
            prop_assert!(kl >= 0.0);
        }
    }
}
