//! Binary PGM (P5) and PPM (P6) frames and frame directories.

use std::path::Path;

use super::{Frame, FrameSequence};
use crate::error::{Error, Result};

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("PNM header ends early".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("PNM {what} is not a number: {tok:?}")))
}

/// Decodes a P5 or P6 image with maxval 255 into a [0,1] frame.
pub fn parse_pnm(bytes: &[u8]) -> Result<Frame> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported PNM magic {other:?}"))),
    };
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "PNM maxval must be 255, found {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("PNM has zero extent".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let expected = width * height * channels;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: raster.len(),
        });
    }
    let data = raster[..expected]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Frame::new(height, width, channels, data)
}

/// Encodes a frame as P5 (one channel) or P6 (three channels), rounding to 8 bits.
pub fn encode_pnm(frame: &Frame) -> Result<Vec<u8>> {
    let magic = match frame.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Channel(format!(
                "PNM holds 1 or 3 channels, frame has {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(
        frame
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

fn frame_index(stem: &str) -> Option<usize> {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

/// Loads the numbered `.pgm` (channels 1) or `.ppm` (channels 3) files of a
/// directory as one sequence, ordered by the trailing frame index.
pub fn load_frame_directory(path: &Path, channels: usize) -> Result<FrameSequence> {
    let ext = match channels {
        1 => "pgm",
        3 => "ppm",
        c => return Err(Error::Channel(format!("channels must be 1 or 3, got {c}"))),
    };
    let mut indexed = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io_at(path, e))? {
        let entry = entry.map_err(|e| Error::io_at(path, e))?;
        let p = entry.path();
        if p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
            != Some(ext)
        {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let idx = frame_index(stem)
            .ok_or_else(|| Error::Format(format!("{} has no frame index", p.display())))?;
        indexed.push((idx, p));
    }
    if indexed.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no .{ext} frames in {}",
            path.display()
        )));
    }
    indexed.sort();
    let count = indexed.len();
    for (expect, (idx, p)) in indexed.iter().enumerate() {
        if *idx != expect {
            if *idx < expect {
                return Err(Error::InconsistentSequence(format!(
                    "duplicate frame index {idx} at {}",
                    p.display()
                )));
            }
            return Err(Error::FrameGap {
                missing: expect,
                count,
            });
        }
    }
    let mut frames = Vec::with_capacity(count);
    for (_, p) in &indexed {
        let bytes = std::fs::read(p).map_err(|e| Error::io_at(p, e))?;
        let frame = parse_pnm(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
            other => other,
        })?;
        if frame.channels != channels {
            return Err(Error::Channel(format!(
                "{} has {} channels, expected {channels}",
                p.display(),
                frame.channels
            )));
        }
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if (first.height, first.width) != (frame.height, frame.width) {
                return Err(Error::InconsistentSequence(format!(
                    "{} is {}x{}, earlier frames are {}x{}",
                    p.display(),
                    frame.width,
                    frame.height,
                    first.width,
                    first.height
                )));
            }
        }
        frames.push(frame);
    }
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("sequence")
        .to_string();
    Ok(FrameSequence {
        id,
        frames,
        label: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5 # a comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let f = parse_pnm(&bytes).unwrap();
        assert_eq!((f.height, f.width, f.channels), (1, 2, 1));
        assert_eq!(f.data, vec![0.0, 1.0]);
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            parse_pnm(b"P3\n1 1\n255\n0"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_pnm(b"P5\n1 1\n65535\n00"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_pnm(b"P5\nx 1\n255\n0"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_pnm(b"P6\n2 2\n255\n012"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn encode_round_trip() {
        let f = Frame::new(2, 3, 3, (0..18).map(|i| i as f32 / 255.0).collect()).unwrap();
        let g = parse_pnm(&encode_pnm(&f).unwrap()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn trailing_index() {
        assert_eq!(frame_index("f007"), Some(7));
        assert_eq!(frame_index("clip2_frame0010"), Some(10));
        assert_eq!(frame_index("frame"), None);
    }
}
