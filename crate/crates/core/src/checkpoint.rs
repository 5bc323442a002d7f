//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `MAUN1\0`, `u32` entry count, then per entry
//! `u16` name length, UTF-8 name, `u8` rank, `rank × u32` extents and the f64
//! payload; a trailing CRC32 covers every payload byte in entry order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 6] = b"MAUN1\0";
const RANK: u8 = 4;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(RANK);
        for e in t.shape().0 {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "bad magic"));
    }
    let count = r.u32()?;
    let mut params = ModelParams::new();
    let mut crc = crc32fast::Hasher::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0];
        if rank != RANK {
            return Err(Error::format(path, format!("`{name}` has rank {rank}, expected {RANK}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = Shape(dims);
        let payload = r.take(shape.numel().checked_mul(8).ok_or_else(|| Error::format(path, "extent overflow"))?)?;
        crc.update(payload);
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        params
            .insert(name, t)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checksum"));
    }
    if stored != crc.finalize() {
        return Err(Error::format(path, "checksum mismatch"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and checks it against the names and shapes of `expected`.
pub fn load_matching(path: &Path, expected: &ModelParams) -> Result<ModelParams> {
    let loaded = load_checkpoint(path)?;
    expected
        .check_compatible(&loaded)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(loaded)
}
