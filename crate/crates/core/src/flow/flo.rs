//! Middlebury `.flo`: `f32` magic 202021.25 (bytes "PIEH"), `i32` width,
//! `i32` height, then row-major interleaved `(u, v)` as `f32`, little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    if !flow.is_finite() {
        return Err(Error::NonFinite("write_flo input".into()));
    }
    let w = i32::try_from(flow.width).map_err(|_| Error::usage("flow too wide for .flo"))?;
    let h = i32::try_from(flow.height).map_err(|_| Error::usage("flow too tall for .flo"))?;
    let mut out = Vec::with_capacity(12 + flow.len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format(".flo header truncated".into()));
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(Error::Format("bad .flo magic (expected PIEH)".into()));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            ".flo payload is {} bytes, expected {expected} for {w}x{h}",
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FlowField::from_interleaved(w, h, &floats)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}
