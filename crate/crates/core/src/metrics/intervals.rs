//! Four equal-width quality bands over a set of per-frame scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUCKET_LABELS: [&str; 4] = ["excellent", "good", "fair", "poor"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub upper: f64,
    pub lower: f64,
    pub count: usize,
}

/// Buckets ordered best to worst.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub buckets: Vec<Bucket>,
    pub range_width: f64,
    pub min: f64,
    pub max: f64,
}

impl IntervalReport {
    pub fn counts(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.buckets[i].count)
    }

    /// Bucket edges from `max` down to `min`.
    pub fn edges(&self) -> [f64; 5] {
        [
            self.buckets[0].upper,
            self.buckets[1].upper,
            self.buckets[2].upper,
            self.buckets[3].upper,
            self.buckets[3].lower,
        ]
    }
}

/// Splits `[min, max]` into four bands of width `(max - min) / 4`.
///
/// The top band is `[max, max - w]`; each later band is open at its upper
/// edge, so a score on a boundary counts toward the better band.
pub fn bucketize_intervals(scores: &[f64]) -> Result<IntervalReport> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InsufficientData("scores must be finite".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() || min == max {
        return Err(Error::DegenerateRange(scores.len()));
    }
    let w = (max - min) / 4.0;
    let edges = [max, max - w, max - 2.0 * w, max - 3.0 * w, min];
    let mut counts = [0usize; 4];
    for &s in scores {
        let band = (1..4).find(|&k| s >= edges[k]).map_or(3, |k| k - 1);
        counts[band] += 1;
    }
    let buckets = (0..4)
        .map(|i| Bucket {
            label: BUCKET_LABELS[i].to_string(),
            upper: edges[i],
            lower: edges[i + 1],
            count: counts[i],
        })
        .collect();
    Ok(IntervalReport {
        buckets,
        range_width: w,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundaries_go_to_better_band() {
        let r = bucketize_intervals(&[0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.range_width, 1.0);
        assert_eq!(r.counts(), [2, 1, 1, 1]);
        assert_eq!(
            bucketize_intervals(&[0.0, 4.0]).unwrap().counts(),
            [1, 0, 0, 1]
        );
    }

    #[test]
    fn degenerate_range() {
        assert!(matches!(
            bucketize_intervals(&[0.5, 0.5]),
            Err(Error::DegenerateRange(2))
        ));
        assert!(matches!(
            bucketize_intervals(&[]),
            Err(Error::DegenerateRange(0))
        ));
    }

    #[test]
    fn reference_row_edges() {
        let r = bucketize_intervals(&[0.19, 0.5, 0.84, 0.7]).unwrap();
        assert!((r.range_width - 0.1625).abs() < 1e-12);
        let rounded = r.edges().map(|e| (e * 100.0).round() / 100.0);
        assert_eq!(rounded, [0.84, 0.68, 0.52, 0.35, 0.19]);
    }

    proptest! {
        #[test]
        fn counts_and_widths(scores in proptest::collection::vec(-1.0f64..1.0, 2..200)) {
            prop_assume!(scores.iter().any(|s| *s != scores[0]));
            let r = bucketize_intervals(&scores).unwrap();
            prop_assert_eq!(r.counts().iter().sum::<usize>(), scores.len());
            let e = r.edges();
            for k in 0..4 {
                prop_assert!(((e[k] - e[k + 1]) - r.range_width).abs() < 1e-12);
            }
            for &s in &scores {
                let band = r.buckets.iter().position(|b| s >= b.lower).unwrap();
                prop_assert!(s <= r.buckets[band].upper);
            }
        }
    }
}
