//! Plain file formats: 16-bit PGM depth maps, PPM overlays, ASCII PLY point
//! sets and a small little-endian tensor container used for network weights.

use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic at byte 0: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("invalid data at byte {offset}: {message}")]
    Invalid { offset: usize, message: String },
}

/// Depth in meters to a 16-bit big-endian PGM in millimeters. Non-finite
/// depths (no hit) become 0.
pub fn depth_to_pgm(width: usize, height: usize, depth: &[f64]) -> Vec<u8> {
    assert_eq!(depth.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(depth.len() * 2);
    for d in depth {
        let mm = if d.is_finite() {
            (d * 1000.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<String, FormatError> {
    while *pos < bytes.len() {
        if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(FormatError::Truncated { offset: start, needed: 1 });
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Inverse of [`depth_to_pgm`]: returns `(width, height, depth_m)` with 0 read
/// back as `f64::INFINITY`.
pub fn pgm_to_depth(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), FormatError> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != "P5" {
        return Err(FormatError::BadMagic { expected: "P5".into() });
    }
    let number = |pos: &mut usize| -> Result<usize, FormatError> {
        let at = *pos;
        let tok = pgm_token(bytes, pos)?;
        tok.parse().map_err(|_| FormatError::Invalid {
            offset: at,
            message: format!("expected an integer, found {tok:?}"),
        })
    };
    let width = number(&mut pos)?;
    let height = number(&mut pos)?;
    let maxval = number(&mut pos)?;
    if maxval != 65535 {
        return Err(FormatError::Invalid {
            offset: pos,
            message: format!("expected 16-bit maxval, found {maxval}"),
        });
    }
    pos += 1;
    let need = width * height * 2;
    if bytes.len() < pos + need {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: pos + need - bytes.len(),
        });
    }
    let depth = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| match u16::from_be_bytes([c[0], c[1]]) {
            0 => f64::INFINITY,
            mm => mm as f64 / 1000.0,
        })
        .collect();
    Ok((width, height, depth))
}

/// 8-bit grayscale PGM from values mapped linearly from `[lo, hi]`.
pub fn gray_to_pgm(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = if hi > lo { hi - lo } else { 1.0 };
    out.extend(values.iter().map(|v| {
        if v.is_finite() {
            (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn rgb_to_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    out
}

pub fn points_to_ply(points: &[Vec3]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(out, "{:.6} {:.6} {:.6}", p.x, p.y, p.z);
    }
    out
}

/// Named f32 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Little-endian tensor container: magic `GNBT`, format version, a kind tag,
/// the feature width, a free-form provenance string and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub feature_dim: u32,
    pub provenance: String,
    pub tensors: Vec<Tensor>,
}

const TENSOR_MAGIC: &[u8; 4] = b"GNBT";
const TENSOR_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Cursor over a byte slice that reports offsets on failure.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Invalid {
            offset: self.pos,
            message: "length overflow".into(),
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn string(&mut self) -> Result<String, FormatError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Invalid {
            offset: at,
            message: "string is not UTF-8".into(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&self.feature_dim.to_le_bytes());
        put_str(&mut out, &self.provenance);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        if r.take(4).ok() != Some(TENSOR_MAGIC.as_slice()) {
            return Err(FormatError::BadMagic { expected: "GNBT".into() });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != TENSOR_VERSION {
            return Err(FormatError::Invalid {
                offset: at,
                message: format!("unsupported version {version}"),
            });
        }
        let kind = r.string()?;
        let feature_dim = r.u32()?;
        let provenance = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.f32s(n)?;
            tensors.push(Tensor { name, shape, data });
        }
        if !r.is_done() {
            return Err(FormatError::Invalid {
                offset: r.pos,
                message: "trailing bytes".into(),
            });
        }
        Ok(Self {
            kind,
            feature_dim,
            provenance,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_in_millimeters() {
        let depth = vec![0.5, f64::INFINITY, 1.2345, 0.0004];
        let bytes = depth_to_pgm(2, 2, &depth);
        let (w, h, back) = pgm_to_depth(&bytes).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(back[0], 0.5);
        assert!(back[1].is_infinite());
        assert_eq!(back[2], 1.235);
        // rounds to 0 mm, which reads back as a miss
        assert!(back[3].is_infinite());
    }

    #[test]
    fn tensor_file_round_trip_and_corruption() {
        let f = TensorFile {
            kind: "head".into(),
            feature_dim: 32,
            provenance: "mix=all".into(),
            tensors: vec![
                Tensor { name: "w".into(), shape: vec![2, 3], data: vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0] },
                Tensor { name: "b".into(), shape: vec![2], data: vec![0.25, -0.5] },
            ],
        };
        let bytes = f.to_bytes();
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap(), f);
        let err = TensorFile::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, FormatError::Truncated { .. }), "{err}");
        assert!(matches!(TensorFile::from_bytes(b"nope"), Err(FormatError::BadMagic { .. })));
    }
}
