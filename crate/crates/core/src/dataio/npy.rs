//! Reader and writer for the `.npy` array container (little-endian, C order).

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Extent that marks an axis as the time axis of a raw video array.
pub const TIME_EXTENT: usize = 20;

/// Typed payload of an array file.
#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl NpyData {
    pub fn len(&self) -> usize {
        match self {
            NpyData::U8(v) => v.len(),
            NpyData::F32(v) => v.len(),
            NpyData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn descr(&self) -> &'static str {
        match self {
            NpyData::U8(_) => "|u1",
            NpyData::F32(_) => "<f4",
            NpyData::F64(_) => "<f8",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

/// Decoded array with values as `f32`, integers rescaled from 0..=255 to [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedArray {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    /// Whether the payload held raw 8-bit intensities.
    pub rescaled: bool,
    /// Axes whose extent equals [`TIME_EXTENT`], in order.
    pub time_axes: Vec<usize>,
}

impl ParsedArray {
    /// First axis of extent 20, the presumed time axis.
    pub fn time_axis(&self) -> Option<usize> {
        self.time_axes.first().copied()
    }
}

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::Format(format!("header lacks {pat}")))?;
    let rest = header[start + pat.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Format(format!("malformed {pat} entry")))?
        .trim_start();
    Ok(rest)
}

fn parse_shape(header: &str) -> Result<Vec<usize>> {
    let rest = header_value(header, "shape")?;
    let body = rest
        .strip_prefix('(')
        .and_then(|r| r.split_once(')'))
        .map(|(b, _)| b)
        .ok_or_else(|| Error::Format("malformed shape tuple".into()))?;
    body.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape extent {s:?}")))
        })
        .collect()
}

fn parse_descr(header: &str) -> Result<String> {
    let rest = header_value(header, "descr")?;
    let quote = rest.chars().next().filter(|c| *c == '\'' || *c == '"');
    let q = quote.ok_or_else(|| Error::Format("descr is not a string".into()))?;
    let inner = &rest[1..];
    let end = inner
        .find(q)
        .ok_or_else(|| Error::Format("unterminated descr".into()))?;
    Ok(inner[..end].to_string())
}

/// Decodes an array file held in memory.
pub fn read_npy_bytes(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("missing .npy magic".into()));
    }
    let major = bytes[6];
    let (header_len, offset) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated header length".into()));
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(Error::Format(format!("unsupported format version {v}"))),
    };
    let end = offset + header_len;
    if bytes.len() < end {
        return Err(Error::Format("header runs past end of file".into()));
    }
    let header = std::str::from_utf8(&bytes[offset..end])
        .map_err(|_| Error::Format("header is not text".into()))?;
    let fortran = header_value(header, "fortran_order")?;
    if fortran.starts_with("True") {
        return Err(Error::Format(
            "fortran-order arrays are not supported".into(),
        ));
    } else if !fortran.starts_with("False") {
        return Err(Error::Format("malformed fortran_order".into()));
    }
    let descr = parse_descr(header)?;
    let shape = parse_shape(header)?;
    let count: usize = shape.iter().product();
    let payload = &bytes[end..];
    let width = match descr.as_str() {
        "|u1" | "<u1" | "u1" => 1,
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    let expected = count * width;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let payload = &payload[..expected];
    let data = match width {
        1 => NpyData::U8(payload.to_vec()),
        4 => NpyData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        _ => NpyData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ),
    };
    Ok(NpyArray { shape, data })
}

/// Encodes an array as a version 1.0 file.
pub fn write_npy_bytes(shape: &[usize], data: &NpyData) -> Result<Vec<u8>> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Format(format!(
            "shape {shape:?} holds {count} values, payload has {}",
            data.len()
        )));
    }
    let dims = match shape.len() {
        1 => format!("{},", shape[0]),
        _ => shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", "),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': ({dims}), }}",
        data.descr()
    );
    // Pad so that the payload starts on a 64-byte boundary.
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let header_len =
        u16::try_from(header.len()).map_err(|_| Error::Format("header too long".into()))?;
    let mut out = Vec::with_capacity(10 + header.len() + count * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match data {
        NpyData::U8(v) => out.extend_from_slice(v),
        NpyData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

/// Decodes an array file into `f32` values, rescaling 8-bit payloads to [0,1]
/// and locating candidate time axes.
pub fn parse_array_file(bytes: &[u8]) -> Result<ParsedArray> {
    let arr = read_npy_bytes(bytes)?;
    let time_axes = arr
        .shape
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == TIME_EXTENT)
        .map(|(i, _)| i)
        .collect();
    let (values, rescaled) = match arr.data {
        NpyData::U8(v) => (v.into_iter().map(|b| b as f32 / 255.0).collect(), true),
        NpyData::F32(v) => (v, false),
        NpyData::F64(v) => (v.into_iter().map(|x| x as f32).collect(), false),
    };
    Ok(ParsedArray {
        shape: arr.shape,
        values,
        rescaled,
        time_axes,
    })
}

/// Encodes `f32` values as a float32 array file.
pub fn write_array_file(shape: &[usize], values: &[f32]) -> Result<Vec<u8>> {
    write_npy_bytes(shape, &NpyData::F32(values.to_vec()))
}

pub fn read_npy(path: impl AsRef<Path>) -> Result<NpyArray> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
    read_npy_bytes(&bytes)
}

pub fn write_npy(path: impl AsRef<Path>, shape: &[usize], data: &NpyData) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_npy_bytes(shape, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io_at(path, e))
}
