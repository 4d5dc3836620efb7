//! Otsu binarization over a 256-bin histogram.

use crate::dataio::Frame;
use crate::error::{Error, Result};

pub const BINS: usize = 256;

/// Histogram bin of a [0,1] intensity.
pub fn intensity_bin(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(BINS - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtsuResult {
    pub frame: Frame,
    /// Pixels in bins above this one become 1.
    pub threshold_bin: usize,
    /// Set when the histogram has a single occupied bin; the output is all zeros.
    pub degenerate: bool,
}

impl OtsuResult {
    pub fn threshold(&self) -> f32 {
        self.threshold_bin as f32 / 255.0
    }
}

/// Between-class variance `ω0·ω1·(μ0 − μ1)²` for every candidate bin.
pub fn between_class_variance(hist: &[u64; BINS]) -> [f64; BINS] {
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut out = [0.0; BINS];
    let (mut n0, mut s0) = (0u64, 0.0f64);
    for t in 0..BINS {
        n0 += hist[t];
        s0 += t as f64 * hist[t] as f64;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
        let (m0, m1) = (s0 / n0 as f64, (sum_all - s0) / n1 as f64);
        out[t] = w0 * w1 * (m0 - m1) * (m0 - m1);
    }
    out
}

/// Binarizes a single-channel frame at the first bin maximizing the
/// between-class variance; pixels in higher bins map to 1.
pub fn otsu_binarize(frame: &Frame) -> Result<OtsuResult> {
    if frame.channels != 1 {
        return Err(Error::Channel(format!(
            "Otsu needs one channel, frame has {}",
            frame.channels
        )));
    }
    let mut hist = [0u64; BINS];
    for &v in &frame.data {
        hist[intensity_bin(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        log::warn!("constant frame has no Otsu threshold; emitting zeros");
        return Ok(OtsuResult {
            frame: Frame::filled(frame.height, frame.width, 1, 0.0),
            threshold_bin: hist.iter().position(|&c| c > 0).unwrap_or(0),
            degenerate: true,
        });
    }
    let var = between_class_variance(&hist);
    let mut best = 0;
    for t in 1..BINS {
        if var[t] > var[best] {
            best = t;
        }
    }
    let data = frame
        .data
        .iter()
        .map(|&v| if intensity_bin(v) > best { 1.0 } else { 0.0 })
        .collect();
    Ok(OtsuResult {
        frame: Frame::new(frame.height, frame.width, 1, data)?,
        threshold_bin: best,
        degenerate: false,
    })
}
