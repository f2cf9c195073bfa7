//! Point-cloud files: ASCII `x y z` lines and binary little-endian PLY.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::PointCloud;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    XyzAscii,
    PlyBinaryLe,
}

impl CloudFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "xyz" | "xyz_ascii" => Some(Self::XyzAscii),
            "ply" | "ply_binary_le" => Some(Self::PlyBinaryLe),
            _ => None,
        }
    }

    /// Format implied by a `.xyz` or `.ply` extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        Self::parse(path.extension()?.to_str()?)
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::XyzAscii => "xyz",
            Self::PlyBinaryLe => "ply",
        }
    }
}

/// Decoding failures; `offset` is the byte position where the problem starts.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum CloudFormatError {
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },
    #[error("malformed record at byte {offset}: {reason}")]
    MalformedRecord { offset: usize, reason: String },
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: usize },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("unexpected {count} trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
}

pub fn encode_xyz(pc: &PointCloud) -> String {
    let mut out = String::with_capacity(pc.len() * 32);
    for p in pc.points() {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    out
}

pub fn decode_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(CloudFormatError::MalformedRecord {
                offset: start,
                reason: format!("expected 3 coordinates, found {}", fields.len()),
            }
            .into());
        }
        let mut p = [0f32; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            let v: f32 = f.parse().map_err(|_| CloudFormatError::MalformedRecord {
                offset: start,
                reason: format!("`{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CloudFormatError::NonFinite { offset: start }.into());
            }
            *slot = v;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn encode_ply(pc: &PointCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        pc.len()
    );
    let mut out = header.into_bytes();
    out.reserve(pc.len() * 12);
    for p in pc.points() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud> {
    let bad = |offset: usize, reason: &str| CloudFormatError::MalformedHeader {
        offset,
        reason: reason.to_string(),
    };
    let mut offset = 0;
    let next_line = |offset: &mut usize| -> std::result::Result<(usize, String), CloudFormatError> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(start, "header line without newline"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| bad(start, "header is not valid UTF-8"))?;
        *offset = start + end + 1;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (at, magic) = next_line(&mut offset)?;
    if magic != "ply" {
        return Err(bad(at, "missing `ply` magic").into());
    }
    let mut vertices = None;
    let mut properties = Vec::new();
    let mut format_seen = false;
    loop {
        let (at, line) = next_line(&mut offset)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", ..] => {
                return Err(bad(at, "only binary_little_endian 1.0 is supported").into())
            }
            ["element", "vertex", n] => {
                if vertices.is_some() {
                    return Err(bad(at, "duplicate vertex element").into());
                }
                vertices = Some(
                    n.parse::<usize>()
                        .map_err(|_| bad(at, "invalid vertex count"))?,
                );
            }
            ["element", _, "0"] => {}
            ["element", ..] => return Err(bad(at, "only the vertex element is supported").into()),
            ["property", ty, name] if vertices.is_some() => {
                if !matches!(*ty, "float" | "float32") {
                    return Err(bad(at, "vertex properties must be 32-bit floats").into());
                }
                properties.push(name.to_string());
            }
            _ => return Err(bad(at, &format!("unexpected header line `{line}`")).into()),
        }
    }
    if !format_seen {
        return Err(bad(0, "missing format line").into());
    }
    let n = vertices.ok_or_else(|| bad(offset, "missing vertex element"))?;
    if properties != ["x", "y", "z"] {
        return Err(bad(offset, "vertex properties must be exactly x, y, z").into());
    }
    let payload = &bytes[offset..];
    let expected = n * 12;
    if payload.len() < expected {
        return Err(CloudFormatError::Truncated {
            offset: offset + payload.len(),
            expected,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(CloudFormatError::TrailingBytes {
            offset: offset + expected,
            count: payload.len() - expected,
        }
        .into());
    }
    let mut points = Vec::with_capacity(n);
    for (i, rec) in payload.chunks_exact(12).enumerate() {
        let mut p = [0f32; 3];
        for (a, slot) in p.iter_mut().enumerate() {
            let v = f32::from_le_bytes(rec[a * 4..a * 4 + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(CloudFormatError::NonFinite {
                    offset: offset + i * 12 + a * 4,
                }
                .into());
            }
            *slot = v;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    match format {
        CloudFormat::PlyBinaryLe => decode_ply(&bytes),
        CloudFormat::XyzAscii => {
            let text =
                std::str::from_utf8(&bytes).map_err(|e| CloudFormatError::MalformedRecord {
                    offset: e.valid_up_to(),
                    reason: "invalid UTF-8".into(),
                })?;
            decode_xyz(text)
        }
    }
}

/// Reads a cloud whose format follows from the file extension.
pub fn read_cloud_auto(path: &Path) -> Result<PointCloud> {
    let format = CloudFormat::from_path(path).ok_or_else(|| {
        Error::InvalidArgument(format!("{}: unknown cloud extension", path.display()))
    })?;
    read_cloud(path, format)
}

pub fn write_cloud(pc: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    match format {
        CloudFormat::PlyBinaryLe => std::fs::write(path, encode_ply(pc))?,
        CloudFormat::XyzAscii => std::fs::write(path, encode_xyz(pc))?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud::new(vec![
            [0.1, -2.5, 3.0e-7],
            [1.0, 0.0, -0.0],
            [f32::MAX, f32::MIN_POSITIVE, 7.25],
        ])
        .unwrap()
    }

    fn format_error(e: Error) -> CloudFormatError {
        match e {
            Error::CloudFormat(f) => f,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn hand_written_xyz() {
        let pc = decode_xyz("0 0 0\n1.5 -2 3\n\n0.25 0.5 0.75\n").unwrap();
        assert_eq!(
            pc.points(),
            &[[0.0, 0.0, 0.0], [1.5, -2.0, 3.0], [0.25, 0.5, 0.75]]
        );
    }

    #[test]
    fn xyz_round_trip_is_exact() {
        let pc = sample();
        assert_eq!(decode_xyz(&encode_xyz(&pc)).unwrap(), pc);
    }

    #[test]
    fn ply_round_trip_is_bitwise() {
        let pc = sample();
        let bytes = encode_ply(&pc);
        let back = decode_ply(&bytes).unwrap();
        let bits = |c: &PointCloud| {
            c.points()
                .iter()
                .flatten()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&pc));
        assert_eq!(encode_ply(&back), bytes);
    }

    #[test]
    fn truncated_ply() {
        let bytes = encode_ply(&sample());
        let err = format_error(decode_ply(&bytes[..bytes.len() - 5]).unwrap_err());
        assert!(matches!(
            err,
            CloudFormatError::Truncated {
                expected: 36,
                found: 31,
                ..
            }
        ));
    }

    #[test]
    fn ply_header_errors() {
        let err = format_error(decode_ply(b"plx\n").unwrap_err());
        assert!(matches!(
            err,
            CloudFormatError::MalformedHeader { offset: 0, .. }
        ));
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        let err = format_error(decode_ply(ascii).unwrap_err());
        assert!(matches!(
            err,
            CloudFormatError::MalformedHeader { offset: 4, .. }
        ));
    }

    #[test]
    fn non_finite_values() {
        let mut bytes = encode_ply(&sample());
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = format_error(decode_ply(&bytes).unwrap_err());
        assert_eq!(err, CloudFormatError::NonFinite { offset: n - 4 });
        let err = format_error(decode_xyz("0 0 0\n1 inf 2\n").unwrap_err());
        assert_eq!(err, CloudFormatError::NonFinite { offset: 6 });
    }
}
