//! The `EMB1` binary matrix format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"EMB1"
//! 4       2     format version, u16 LE (currently 1)
//! 6       1     dtype tag: 0 = f32, 1 = f64
//! 7       8     row count, u64 LE
//! 15      8     column count, u64 LE
//! 23      ...   rows * cols little-endian floats, row-major
//! ```
//!
//! Datasets and label embeddings are stored as f32 (values are narrowed with
//! round-to-nearest-even). Checkpoints use f64 so parameters round-trip exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Matrix;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Serializes `m` into an in-memory EMB1 record.
pub fn encode(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    match dtype {
        Dtype::F32 => {
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix, dtype: Dtype) -> std::io::Result<()> {
    w.write_all(&encode(m, dtype))
}

struct Header {
    dtype: Dtype,
    rows: usize,
    cols: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(bad_magic(&bytes[..4]));
        }
        return Err(Error::Truncated(format!(
            "header needs {HEADER_LEN} bytes, found {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad_magic(&bytes[..4]));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: u32::from(version),
            expected: u32::from(VERSION),
        });
    }
    let dtype = Dtype::from_tag(bytes[6])?;
    let rows = u64::from_le_bytes(bytes[7..15].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[15..23].try_into().unwrap());
    let to_usize = |v: u64, name: &str| {
        usize::try_from(v).map_err(|_| Error::Format(format!("{name} {v} does not fit in memory")))
    };
    Ok(Header {
        dtype,
        rows: to_usize(rows, "rows")?,
        cols: to_usize(cols, "cols")?,
    })
}

fn bad_magic(found: &[u8]) -> Error {
    Error::Format(format!(
        "expected magic \"EMB1\", found {:?}",
        String::from_utf8_lossy(found)
    ))
}

fn payload_len(h: &Header) -> Result<usize> {
    h.rows
        .checked_mul(h.cols)
        .and_then(|n| n.checked_mul(h.dtype.size()))
        .ok_or_else(|| Error::Format(format!("{}x{} overflows", h.rows, h.cols)))
}

fn decode_payload(h: &Header, payload: &[u8]) -> Result<Matrix> {
    let data = match h.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Matrix::new(h.rows, h.cols, data)
}

/// Decodes one record from the front of `bytes`; returns the matrix, its
/// dtype, and the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Matrix, Dtype, usize)> {
    let h = parse_header(bytes)?;
    let need = payload_len(&h)?;
    let have = bytes.len() - HEADER_LEN;
    if have < need {
        return Err(Error::Truncated(format!(
            "{}x{} {:?} needs {need} payload bytes, found {have}",
            h.rows, h.cols, h.dtype
        )));
    }
    let m = decode_payload(&h, &bytes[HEADER_LEN..HEADER_LEN + need])?;
    Ok((m, h.dtype, HEADER_LEN + need))
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> Result<(Matrix, Dtype)> {
    let (m, dtype, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Truncated(format!(
            "header declares {}x{} ({used} bytes) but buffer holds {} bytes",
            m.rows(),
            m.cols(),
            bytes.len()
        )));
    }
    Ok((m, dtype))
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<(Matrix, Dtype)> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| Error::Truncated(format!("reading header: {e}")))?;
    let h = parse_header(&header)?;
    let mut payload = vec![0u8; payload_len(&h)?];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Truncated(format!("reading {}x{} payload: {e}", h.rows, h.cols)))?;
    Ok((decode_payload(&h, &payload)?, h.dtype))
}

pub fn save(path: impl AsRef<Path>, m: &Matrix, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(m, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map(|(m, _)| m).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Truncated(msg) => Error::Truncated(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Rounds every entry through f32, matching what an f32 save/load does.
pub fn quantize_f32(m: &Matrix) -> Matrix {
    Matrix::from_raw(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| f64::from(v as f32)).collect(),
    )
}
