//! Tensor file format used for lip frames, face images and mel outputs.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"FVXT"
//! version u8 (1)
//! dtype   u8 (0 = u8, 1 = f32)
//! rank    u8
//! dims    rank × u32
//! length  u64   byte length of the deflated payload
//! payload deflate(raw row-major elements)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FVXT";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::checked(dims, TensorData::U8(data))
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::checked(dims, TensorData::F32(data))
    }

    fn checked(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = match &data {
            TensorData::U8(d) => d.len(),
            TensorData::F32(d) => d.len(),
        };
        if dims.iter().product::<usize>() != n {
            return Err(Error::Shape(format!(
                "dims {dims:?} do not match {n} elements"
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (tag, raw): (u8, Vec<u8>) = match &self.data {
            TensorData::U8(d) => (0, d.clone()),
            TensorData::F32(d) => (1, d.iter().flat_map(|v| v.to_le_bytes()).collect()),
        };
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(6));
        enc.write_all(&raw).map_err(|e| Error::io("<memory>", e))?;
        let payload = enc.finish().map_err(|e| Error::io("<memory>", e))?;
        let mut out = Vec::with_capacity(payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(tag);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses bytes; `origin` is used in corruption errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |why: &str| Error::corrupt(origin, why);
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err(bad("not a tensor file (bad magic)"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!(
                "unsupported tensor file version {}",
                bytes[4]
            )));
        }
        let tag = bytes[5];
        let rank = bytes[6] as usize;
        let mut pos = 7;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| bad("truncated header"))?;
            dims.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
            pos += 4;
        }
        let b = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| bad("truncated header"))?;
        let len = u64::from_le_bytes(b.try_into().unwrap()) as usize;
        pos += 8;
        let payload = bytes
            .get(pos..)
            .filter(|p| p.len() == len)
            .ok_or_else(|| bad("payload length mismatch"))?;
        let mut raw = Vec::new();
        DeflateDecoder::new(payload)
            .read_to_end(&mut raw)
            .map_err(|e| bad(&format!("payload does not inflate: {e}")))?;
        let n: usize = dims.iter().product();
        let data = match tag {
            0 if raw.len() == n => TensorData::U8(raw),
            1 if raw.len() == 4 * n => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            0 | 1 => return Err(bad("element count does not match dims")),
            t => return Err(bad(&format!("unknown dtype tag {t}"))),
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn into_u8(self, origin: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.data {
            TensorData::U8(d) => Ok((self.dims, d)),
            TensorData::F32(_) => Err(Error::corrupt(origin, "expected u8 tensor")),
        }
    }

    pub fn into_f32(self, origin: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
        match self.data {
            TensorData::F32(d) => Ok((self.dims, d)),
            TensorData::U8(_) => Err(Error::corrupt(origin, "expected f32 tensor")),
        }
    }
}
