//! Separable Lanczos-3 resampling.

use crate::dataio::Frame;
use crate::error::{Error, Result};

pub const LANCZOS_A: f64 = 3.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// `sinc(x)·sinc(x/3)` on `|x| < 3`, zero elsewhere.
pub fn lanczos3(x: f64) -> f64 {
    if x.abs() < LANCZOS_A {
        sinc(x) * sinc(x / LANCZOS_A)
    } else {
        0.0
    }
}

/// Contributions of input samples to one output sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    pub start: usize,
    pub weights: Vec<f64>,
}

/// Normalized per-output weights for resampling `input` samples to `output`.
///
/// Output sample `i` is centred at input coordinate `(i + 0.5)·s − 0.5` with
/// `s = input / output`. When shrinking, the kernel is widened by `s` so that
/// it also low-pass filters. Taps falling outside the input are dropped and
/// the remainder renormalized.
pub fn lanczos_taps(input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    let stretch = scale.max(1.0);
    let support = LANCZOS_A * stretch;
    (0..output)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = ((center - support).floor() as isize + 1).max(0) as usize;
            let hi = ((center + support).ceil() as isize - 1)
                .min(input as isize - 1)
                .max(lo as isize) as usize;
            let mut weights: Vec<f64> = (lo..=hi)
                .map(|j| lanczos3((j as f64 - center) / stretch))
                .collect();
            let sum: f64 = weights.iter().sum();
            if sum.abs() > 1e-12 {
                weights.iter_mut().for_each(|w| *w /= sum);
            } else {
                // Degenerate window: fall back to the nearest sample.
                weights = vec![0.0; hi - lo + 1];
                let nearest = (center.round().max(0.0) as usize).clamp(lo, hi);
                weights[nearest - lo] = 1.0;
            }
            Taps { start: lo, weights }
        })
        .collect()
}

/// Resamples a frame to `(height, width)` channel by channel, clamping to [0,1].
pub fn resize_lanczos(frame: &Frame, target: (usize, usize)) -> Result<Frame> {
    let (th, tw) = target;
    if th == 0 || tw == 0 || frame.height == 0 || frame.width == 0 {
        return Err(Error::Size(format!(
            "cannot resize {}x{} to {th}x{tw}",
            frame.height, frame.width
        )));
    }
    if (th, tw) == (frame.height, frame.width) {
        return Ok(frame.clone());
    }
    let (h, w, c) = frame.dims();
    let xt = lanczos_taps(w, tw);
    let yt = lanczos_taps(h, th);
    // Horizontal pass into an h × tw × c buffer.
    let mut mid = vec![0.0f64; h * tw * c];
    for y in 0..h {
        for (ox, t) in xt.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wt) in t.weights.iter().enumerate() {
                    acc += wt * frame.data[(y * w + t.start + k) * c + ch] as f64;
                }
                mid[(y * tw + ox) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; th * tw * c];
    for (oy, t) in yt.iter().enumerate() {
        for ox in 0..tw {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wt) in t.weights.iter().enumerate() {
                    acc += wt * mid[((t.start + k) * tw + ox) * c + ch];
                }
                out[(oy * tw + ox) * c + ch] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Frame::new(th, tw, c, out)
}
