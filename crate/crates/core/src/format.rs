//! Binary containers.
//!
//! Latent interchange (`GMLT`), little-endian:
//!
//! ```text
//! magic "GMLT" | version u32 = 1 | rank u32 | dims u32 × rank
//! | payload f32 × ∏dims (row-major) | crc32(payload) u32
//! ```
//!
//! Model files (`GMNR` restorer, `GMFU` fuser) share one block layout:
//!
//! ```text
//! magic | version u32 | header u32 × k | { layer id u32, count u64, f32 × count }*
//! | crc32(everything before the trailer) u32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::latent::{LatentTensor, Shape, SignalMap};

pub const LATENT_MAGIC: [u8; 4] = *b"GMLT";
pub const LATENT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| FormatError::Malformed(format!("element count {count} overflows")))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn check_finite(values: &[f32]) -> Result<(), FormatError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(FormatError::NonFinite { index }),
        None => Ok(()),
    }
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_latent(shape: Shape, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + values.len() * 4);
    out.extend_from_slice(&LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in shape.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let start = out.len();
    push_f32s(&mut out, values);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses a `GMLT` buffer into its shape and raw payload.
pub fn decode_latent(buf: &[u8]) -> Result<(Shape, Vec<f32>), FormatError> {
    let mut r = Reader::new(buf);
    r.magic(LATENT_MAGIC)?;
    let version = r.u32()?;
    if version != LATENT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            expected: LATENT_VERSION,
            found: version,
        });
    }
    let rank = r.u32()? as usize;
    if rank != 3 {
        return Err(FormatError::Malformed(format!("expected rank 3, found {rank}")));
    }
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let shape = Shape::from_dims(&dims)
        .map_err(|_| FormatError::Malformed(format!("invalid dims {dims:?}")))?;
    let start = r.pos;
    let values = r.f32s(shape.len())?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(&buf[start..start + shape.len() * 4]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    check_finite(&values)?;
    Ok((shape, values))
}

pub fn write_latent(x: &LatentTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_latent(x.shape(), x.data()))?;
    Ok(())
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentTensor> {
    let (shape, values) = decode_latent(&fs::read(path)?)?;
    LatentTensor::new(shape, values)
}

/// Signal maps travel in the same container with values exactly 0.0/1.0.
pub fn write_signal_map(s: &SignalMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_latent(s.shape(), &s.to_f32()))?;
    Ok(())
}

pub fn read_signal_map(path: impl AsRef<Path>) -> Result<SignalMap> {
    let (shape, values) = decode_latent(&fs::read(path)?)?;
    let bits = values
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            v if v == 0.0 => Ok(0u8),
            v if v == 1.0 => Ok(1u8),
            _ => Err(FormatError::Malformed(format!("element {i} = {v} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    SignalMap::new(shape, bits)
}

/// Decoded form of a `GMNR`/`GMFU` model file.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ModelContainer {
    pub header: Vec<u32>,
    pub blocks: Vec<(u32, Vec<f32>)>,
}

pub(crate) const MODEL_VERSION: u32 = 1;

impl ModelContainer {
    pub fn encode(&self, magic: [u8; 4]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&magic);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for h in &self.header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for (id, values) in &self.blocks {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            push_f32s(&mut out, values);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8], magic: [u8; 4], header_len: usize) -> Result<Self, FormatError> {
        let mut r = Reader::new(buf);
        r.magic(magic)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(FormatError::UnsupportedVersion {
                expected: MODEL_VERSION,
                found: version,
            });
        }
        let header = (0..header_len).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let mut blocks = Vec::new();
        while r.remaining() > 4 {
            let id = r.u32()?;
            let count = usize::try_from(r.u64()?)
                .map_err(|_| FormatError::Malformed("block too large".into()))?;
            let values = r.f32s(count)?;
            check_finite(&values)?;
            blocks.push((id, values));
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&buf[..body_end]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        Ok(ModelContainer { header, blocks })
    }
}

pub(crate) fn block_count_error(expected: usize, found: usize) -> Error {
    FormatError::Malformed(format!("expected {expected} parameter blocks, found {found}")).into()
}
