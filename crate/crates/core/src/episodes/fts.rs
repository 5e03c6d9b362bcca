//! FTS tensor files.
//!
//! Layout (little-endian):
//! - magic `FTS1` (4 bytes)
//! - dtype code: u8, `1` = f32
//! - ndim: u8
//! - extents: ndim * u32
//! - payload: f32 * product(extents), row-major

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FTS1";
pub const DTYPE_F32: u8 = 1;

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Serializes a tensor, narrowing every value to `f32`.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.dims().len() > u8::MAX as usize {
        return Err(Error::invalid(format!("{} dims do not fit the header", t.dims().len())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, &v) in t.data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::invalid(format!("entry {i} ({v}) is out of f32 range")));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "file ends inside the magic bytes"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected FTS1"));
    }
    let Some(&dtype) = bytes.get(4) else {
        return Err(format_err(4, "file ends before the dtype code"));
    };
    if dtype != DTYPE_F32 {
        return Err(format_err(4, format!("unsupported dtype code {dtype}")));
    }
    let Some(&ndim) = bytes.get(5) else {
        return Err(format_err(5, "file ends before the dimension count"));
    };
    if ndim == 0 {
        return Err(format_err(5, "tensor has no dimensions"));
    }
    let mut pos = 6;
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 0..ndim {
        let Some(raw) = bytes.get(pos..pos + 4) else {
            return Err(format_err(bytes.len(), format!("header declares {ndim} dims but ends after {i}")));
        };
        let d = u32::from_le_bytes(raw.try_into().expect("4-byte slice")) as usize;
        if d == 0 {
            return Err(format_err(pos, format!("extent {i} is zero")));
        }
        dims.push(d);
        pos += 4;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(6, "extents overflow the addressable size"))?;
    let payload = &bytes[pos..];
    if payload.len() < count {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: expected {count} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > count {
        return Err(format_err(pos + count, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(count / 4);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(format_err(pos + 4 * i, "non-finite value"));
        }
        data.push(v as f64);
    }
    Tensor::new(dims, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}
