//! Binary parameter checkpoints.
//!
//! Layout, all little-endian: `b"LAOF"`, format version `u32`, parameter
//! count `u64`, then per parameter: name length `u16`, UTF-8 name bytes,
//! rank `u8`, extents `u32 x rank`, `f32` data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LAOF";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + store.total_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, name, t) in store.iter() {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("rank too large for {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e)
                .map_err(|_| Error::Format(format!("extent too large for {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        store.insert(name, t)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
