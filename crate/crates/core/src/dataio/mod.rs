//! Frames, sequences and datasets, with array-file and PNM ingestion and
//! sequence-level splitting.

mod npy;
mod pnm;
mod split;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use npy::{
    parse_array_file, read_npy, read_npy_bytes, write_array_file, write_npy, write_npy_bytes,
    NpyArray, NpyData, ParsedArray, TIME_EXTENT,
};
pub use pnm::{encode_pnm, load_frame_directory, parse_pnm};
pub use split::{fraction_count, split_sequences, DatasetSplit};

/// One image, row-major HWC with values in [0,1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Size(format!(
                "{height}x{width}x{channels} frame needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// One channel as a dense `height * width` plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Channel-major copy, the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        (0..self.channels).flat_map(|c| self.plane(c)).collect()
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f32]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * channels {
            return Err(Error::Size(format!(
                "channel-major buffer of {} values for {height}x{width}x{channels}",
                chw.len()
            )));
        }
        let mut data = vec![0.0; chw.len()];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = chw[c * plane + i];
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }
}

/// Ordered frames of one video with its provenance id and optional action label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<Frame>,
    pub label: Option<String>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Shared frame dimensions, or an error if frames disagree.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let first = self.frames.first().ok_or_else(|| {
            Error::InconsistentSequence(format!("sequence {} has no frames", self.id))
        })?;
        if let Some(f) = self.frames.iter().find(|f| f.dims() != first.dims()) {
            return Err(Error::InconsistentSequence(format!(
                "sequence {} mixes {:?} and {:?} frames",
                self.id,
                first.dims(),
                f.dims()
            )));
        }
        Ok(first.dims())
    }
}

/// Sidecar carrying ids and labels next to an interchange array file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub ids: Vec<String>,
    pub labels: Vec<Option<String>>,
}

/// A collection of equally shaped sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<FrameSequence>,
}

/// Path of the metadata sidecar for an array file: `<stem>.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    path.with_file_name(format!("{stem}.meta.json"))
}

impl Dataset {
    pub fn new(sequences: Vec<FrameSequence>) -> Self {
        Self { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sequences.iter().map(|s| s.id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<Option<String>> {
        self.sequences.iter().map(|s| s.label.clone()).collect()
    }

    /// Common (length, height, width, channels) of every sequence.
    pub fn shape(&self) -> Result<(usize, usize, usize, usize)> {
        let first = self
            .sequences
            .first()
            .ok_or_else(|| Error::InsufficientData("dataset is empty".into()))?;
        let (h, w, c) = first.dims()?;
        for s in &self.sequences {
            if s.len() != first.len() || s.dims()? != (h, w, c) {
                return Err(Error::InconsistentSequence(format!(
                    "sequence {} does not match the {}x{h}x{w}x{c} layout of {}",
                    s.id,
                    first.len(),
                    first.id
                )));
            }
        }
        Ok((first.len(), h, w, c))
    }

    /// Sequences with the given ids, in the order requested.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let index: HashMap<&str, usize> = self
            .sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let sequences = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.sequences[i].clone())
                    .ok_or_else(|| {
                        Error::InsufficientData(format!("sequence id {id:?} not in dataset"))
                    })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { sequences })
    }

    /// Builds sequences from a decoded rank-4 `(a, b, H, W)` or rank-5
    /// `(a, b, H, W, C)` array in which one of the first two axes is time.
    ///
    /// Without an override the time axis is the one of extent 20 among the
    /// first two; if both or neither qualify, axis 1 is used.
    pub fn from_array(parsed: &ParsedArray, time_axis: Option<usize>) -> Result<Dataset> {
        let shape = &parsed.shape;
        let (h, w, c) = match shape.len() {
            4 => (shape[2], shape[3], 1),
            5 => (shape[2], shape[3], shape[4]),
            r => {
                return Err(Error::Format(format!(
                    "expected a rank 4 or 5 array, got shape {shape:?} (rank {r})"
                )))
            }
        };
        let t_axis = match time_axis {
            Some(a @ (0 | 1)) => a,
            Some(a) => return Err(Error::Config(format!("time axis must be 0 or 1, got {a}"))),
            None => {
                let cands: Vec<usize> = parsed
                    .time_axes
                    .iter()
                    .copied()
                    .filter(|&a| a < 2)
                    .collect();
                match cands.as_slice() {
                    [0] => 0,
                    [1] => 1,
                    [0, 1] => {
                        log::warn!(
                            "both leading axes have extent {TIME_EXTENT}; treating axis 1 as time"
                        );
                        1
                    }
                    _ => {
                        log::debug!(
                            "no leading axis of extent {TIME_EXTENT}; treating axis 1 as time"
                        );
                        1
                    }
                }
            }
        };
        let (n, t) = if t_axis == 0 {
            (shape[1], shape[0])
        } else {
            (shape[0], shape[1])
        };
        let frame = h * w * c;
        let mut sequences = Vec::with_capacity(n);
        for s in 0..n {
            let frames = (0..t)
                .map(|k| {
                    let block = if t_axis == 0 { k * n + s } else { s * t + k };
                    Frame::new(
                        h,
                        w,
                        c,
                        parsed.values[block * frame..(block + 1) * frame].to_vec(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(FrameSequence {
                id: format!("seq{s:05}"),
                frames,
                label: None,
            });
        }
        Ok(Dataset { sequences })
    }

    /// Interchange array `(N, T, H, W, C)` as float32.
    pub fn to_array(&self) -> Result<(Vec<usize>, Vec<f32>)> {
        let (t, h, w, c) = self.shape()?;
        let mut values = Vec::with_capacity(self.len() * t * h * w * c);
        for s in &self.sequences {
            for f in &s.frames {
                values.extend_from_slice(&f.data);
            }
        }
        Ok((vec![self.len(), t, h, w, c], values))
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            ids: self.ids(),
            labels: self.labels(),
        }
    }

    /// Writes the interchange array plus its metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (shape, values) = self.to_array()?;
        let bytes = write_array_file(&shape, &values)?;
        std::fs::write(path, bytes).map_err(|e| Error::io_at(path, e))?;
        let meta = meta_path(path);
        let json = serde_json::to_vec_pretty(&self.meta())?;
        std::fs::write(&meta, json).map_err(|e| Error::io_at(&meta, e))
    }

    /// Reads an interchange array; ids and labels come from the sidecar when present.
    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
        let parsed = parse_array_file(&bytes)?;
        let mut ds = Dataset::from_array(&parsed, Some(1))?;
        let meta = meta_path(path);
        if meta.exists() {
            let raw = std::fs::read(&meta).map_err(|e| Error::io_at(&meta, e))?;
            let m: DatasetMeta = serde_json::from_slice(&raw)?;
            ds.apply_meta(m)?;
        }
        Ok(ds)
    }

    pub fn apply_meta(&mut self, meta: DatasetMeta) -> Result<()> {
        if meta.ids.len() != self.len()
            || (!meta.labels.is_empty() && meta.labels.len() != self.len())
        {
            return Err(Error::InconsistentSequence(format!(
                "metadata lists {} ids and {} labels for {} sequences",
                meta.ids.len(),
                meta.labels.len(),
                self.len()
            )));
        }
        for (i, s) in self.sequences.iter_mut().enumerate() {
            s.id = meta.ids[i].clone();
            s.label = meta.labels.get(i).cloned().flatten();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parsed(shape: Vec<usize>) -> ParsedArray {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let bytes = write_array_file(&shape, &values).unwrap();
        parse_array_file(&bytes).unwrap()
    }

    #[test]
    fn time_first_layout() {
        let p = parsed(vec![20, 3, 2, 2]);
        let ds = Dataset::from_array(&p, None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.shape().unwrap(), (20, 2, 2, 1));
        // Frame (t=1, s=2) sits at block 1*3+2.
        assert_eq!(ds.sequences[2].frames[1].data[0], 20.0);
    }

    #[test]
    fn interchange_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = parsed(vec![2, 20, 2, 2, 3]);
        let mut ds = Dataset::from_array(&p, None).unwrap();
        ds.sequences[1].label = Some("walk".into());
        ds.sequences[0].id = "a".into();
        let path = dir.path().join("d.npy");
        ds.save(&path).unwrap();
        assert!(meta_path(&path).ends_with("d.meta.json"));
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn chw_round_trip() {
        let f = Frame::new(2, 2, 3, (0..12).map(|i| i as f32).collect()).unwrap();
        let chw = f.to_chw();
        assert_eq!(&chw[..4], &[0.0, 3.0, 6.0, 9.0]);
        assert_eq!(Frame::from_chw(2, 2, 3, &chw).unwrap(), f);
    }

    #[test]
    fn subset_unknown_id() {
        let ds = Dataset::from_array(&parsed(vec![2, 20, 1, 1]), None).unwrap();
        assert!(ds.subset(&["nope".into()]).is_err());
        assert_eq!(
            ds.subset(&["seq00001".into()]).unwrap().sequences[0].id,
            "seq00001"
        );
    }
}
