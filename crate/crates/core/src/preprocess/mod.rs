//! Turns raw sequences into the training corpus: truncation to a fixed
//! length, border cropping, Lanczos resizing, Otsu binarization, stratified
//! subsetting and a centroid-based continuity diagnostic.

mod otsu;
mod resize;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Frame, FrameSequence};
use crate::error::{Error, Result};

pub use otsu::{between_class_variance, intensity_bin, otsu_binarize, OtsuResult, BINS};
pub use resize::{lanczos3, lanczos_taps, resize_lanczos, Taps, LANCZOS_A};

/// Default border threshold, 10/255 on the brightest channel.
pub const DEFAULT_BORDER_THRESHOLD: f32 = 10.0 / 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub target_length: usize,
    /// (height, width)
    pub target_size: (usize, usize),
    pub binarize: bool,
    pub crop_borders: bool,
    pub border_threshold: f32,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_length: 20,
            target_size: (64, 64),
            binarize: false,
            crop_borders: false,
            border_threshold: DEFAULT_BORDER_THRESHOLD,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_length < 2 {
            return Err(Error::Config("target length must be at least 2".into()));
        }
        if self.target_size.0 < 8 || self.target_size.1 < 8 {
            return Err(Error::Config(format!(
                "target size {:?} is below 8 pixels",
                self.target_size
            )));
        }
        Ok(())
    }
}

/// Keeps the first `target_length` frames.
pub fn standardize_length(seq: &FrameSequence, target_length: usize) -> Result<FrameSequence> {
    if seq.len() < target_length {
        return Err(Error::TooShort {
            len: seq.len(),
            target: target_length,
        });
    }
    Ok(FrameSequence {
        id: seq.id.clone(),
        frames: seq.frames[..target_length].to_vec(),
        label: seq.label.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropResult {
    pub frame: Frame,
    /// Rows removed at the top and bottom, columns at the left and right.
    pub removed: [usize; 4],
    /// Set when every pixel is below the threshold; the frame is returned as is.
    pub degenerate: bool,
}

/// Strips leading and trailing rows and columns whose brightest value across
/// channels is below `threshold`.
pub fn crop_black_borders(frame: &Frame, threshold: f32) -> CropResult {
    let (h, w, c) = frame.dims();
    let bright = |y: usize, x: usize| {
        (0..c)
            .map(|ch| frame.get(y, x, ch))
            .fold(f32::NEG_INFINITY, f32::max)
    };
    let row_on = |y: usize| (0..w).any(|x| bright(y, x) >= threshold);
    let col_on = |x: usize| (0..h).any(|y| bright(y, x) >= threshold);
    let Some(top) = (0..h).find(|&y| row_on(y)) else {
        log::warn!("frame is entirely below the border threshold; left uncropped");
        return CropResult {
            frame: frame.clone(),
            removed: [0; 4],
            degenerate: true,
        };
    };
    let bottom = (0..h).rev().find(|&y| row_on(y)).unwrap_or(top);
    let left = (0..w).find(|&x| col_on(x)).unwrap_or(0);
    let right = (0..w).rev().find(|&x| col_on(x)).unwrap_or(left);
    let (nh, nw) = (bottom - top + 1, right - left + 1);
    let mut data = Vec::with_capacity(nh * nw * c);
    for y in top..=bottom {
        data.extend_from_slice(&frame.data[(y * w + left) * c..(y * w + right + 1) * c]);
    }
    CropResult {
        frame: Frame::new(nh, nw, c, data).expect("cropped extent is consistent"),
        removed: [top, h - 1 - bottom, left, w - 1 - right],
        degenerate: false,
    }
}

/// Picks `m` ids so that label counts are as even as populations allow.
///
/// Every label first receives an equal share capped at its population; the
/// shortfall from capped labels is redistributed the same way, and the final
/// remainder goes to a seeded random choice of labels that still have room.
pub fn stratified_subset(items: &[(String, String)], m: usize, seed: u64) -> Result<Vec<String>> {
    if m > items.len() {
        return Err(Error::Size(format!(
            "cannot draw {m} ids from {}",
            items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in items.iter().enumerate() {
        groups.entry(label.as_str()).or_default().push(i);
    }
    let labels: Vec<&str> = groups.keys().copied().collect();
    let pop: Vec<usize> = labels.iter().map(|l| groups[l].len()).collect();
    let mut alloc = vec![0usize; labels.len()];
    let mut remaining = m;
    loop {
        let open: Vec<usize> = (0..labels.len()).filter(|&i| alloc[i] < pop[i]).collect();
        if open.is_empty() || remaining == 0 {
            break;
        }
        let share = remaining / open.len();
        if share == 0 {
            let mut pick = open;
            pick.shuffle(&mut rng);
            for &i in pick.iter().take(remaining) {
                alloc[i] += 1;
            }
            break;
        }
        for &i in &open {
            let give = share.min(pop[i] - alloc[i]);
            alloc[i] += give;
            remaining -= give;
        }
    }
    let mut chosen = Vec::with_capacity(m);
    for (i, label) in labels.iter().enumerate() {
        let mut members = groups[label].clone();
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..alloc[i]]);
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| items[i].0.clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagDistance {
    pub lag: usize,
    /// `None` when no pair of frames at this lag had a defined centroid.
    pub mean_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub id: String,
    pub per_lag_mean_distance: Vec<LagDistance>,
    /// Fraction of adjacent lag pairs whose mean distance does not decrease.
    pub monotone_fraction: f64,
    /// Frames with zero total intensity, whose centroid is undefined.
    pub skipped_frames: Vec<usize>,
}

impl ContinuityReport {
    pub fn passes(&self, min_fraction: f64) -> bool {
        self.monotone_fraction >= min_fraction
    }
}

/// Intensity-weighted mean pixel coordinate `(x, y)` of the channel-mean image.
pub fn centroid(frame: &Frame) -> Option<(f64, f64)> {
    let (h, w, c) = frame.dims();
    let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = (0..c).map(|ch| frame.get(y, x, ch) as f64).sum::<f64>() / c as f64;
            sx += v * x as f64;
            sy += v * y as f64;
            total += v;
        }
    }
    (total > 0.0).then(|| (sx / total, sy / total))
}

/// Mean centroid displacement per frame lag, as a motion-consistency check.
pub fn verify_continuity(seq: &FrameSequence) -> Result<ContinuityReport> {
    let t = seq.len();
    if t < 3 {
        return Err(Error::TooShort { len: t, target: 3 });
    }
    let cents: Vec<Option<(f64, f64)>> = seq.frames.iter().map(centroid).collect();
    let skipped: Vec<usize> = cents
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_none())
        .map(|(i, _)| i)
        .collect();
    if !skipped.is_empty() {
        log::debug!(
            "sequence {}: {} blank frame(s) skipped",
            seq.id,
            skipped.len()
        );
    }
    let per_lag: Vec<LagDistance> = (1..t)
        .map(|k| {
            let d: Vec<f64> = (0..t - k)
                .filter_map(|i| match (cents[i], cents[i + k]) {
                    (Some(a), Some(b)) => Some(((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()),
                    _ => None,
                })
                .collect();
            LagDistance {
                lag: k,
                mean_distance: (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64),
            }
        })
        .collect();
    let pairs: Vec<bool> = per_lag
        .windows(2)
        .filter_map(|p| Some(p[1].mean_distance? >= p[0].mean_distance?))
        .collect();
    let monotone_fraction = if pairs.is_empty() {
        1.0
    } else {
        pairs.iter().filter(|&&b| b).count() as f64 / pairs.len() as f64
    };
    Ok(ContinuityReport {
        id: seq.id.clone(),
        per_lag_mean_distance: per_lag,
        monotone_fraction,
        skipped_frames: skipped,
    })
}

/// Counts of degenerate cases met while preprocessing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub sequences: usize,
    pub frames: usize,
    pub constant_frames: usize,
    pub blank_frames: usize,
}

/// Applies truncation, cropping, resizing and binarization, in that order.
pub fn preprocess_sequence(
    seq: &FrameSequence,
    spec: &PreprocessSpec,
) -> Result<(FrameSequence, PreprocessSummary)> {
    spec.validate()?;
    let mut seq = standardize_length(seq, spec.target_length)?;
    let mut summary = PreprocessSummary {
        sequences: 1,
        frames: seq.len(),
        ..Default::default()
    };
    for f in &mut seq.frames {
        if spec.crop_borders {
            let c = crop_black_borders(f, spec.border_threshold);
            summary.blank_frames += c.degenerate as usize;
            *f = c.frame;
        }
        *f = resize_lanczos(f, spec.target_size)?;
        if spec.binarize {
            let o = otsu_binarize(f)?;
            summary.constant_frames += o.degenerate as usize;
            *f = o.frame;
        }
    }
    Ok((seq, summary))
}

/// Preprocesses every sequence in parallel.
pub fn preprocess_dataset(
    ds: &Dataset,
    spec: &PreprocessSpec,
) -> Result<(Dataset, PreprocessSummary)> {
    let done: Vec<(FrameSequence, PreprocessSummary)> = ds
        .sequences
        .par_iter()
        .map(|s| preprocess_sequence(s, spec).map_err(|e| annotate(e, &s.id)))
        .collect::<Result<_>>()?;
    let mut total = PreprocessSummary::default();
    let mut sequences = Vec::with_capacity(done.len());
    for (s, sum) in done {
        total.sequences += sum.sequences;
        total.frames += sum.frames;
        total.constant_frames += sum.constant_frames;
        total.blank_frames += sum.blank_frames;
        sequences.push(s);
    }
    Ok((Dataset::new(sequences), total))
}

fn annotate(e: Error, id: &str) -> Error {
    match e {
        Error::TooShort { len, target } => {
            Error::InconsistentSequence(format!("sequence {id} has {len} frames, needs {target}"))
        }
        other => other,
    }
}
