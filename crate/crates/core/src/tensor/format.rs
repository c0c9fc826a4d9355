//! Flat binary tensor format used by checkpoints, datasets, and dumps.
//!
//! Layout (all integers little-endian):
//! magic `"GSTN"`, version `u32`, rank `u32`, dims as `u64` each, then
//! the values as little-endian `f64` in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GSTN";
pub const VERSION: u32 = 1;

pub fn encode(shape: &[usize], vals: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + shape.len() * 8 + vals.len() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes a buffer, naming `origin` and the byte offset on failure.
pub fn decode(bytes: &[u8], origin: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let fail = |offset: usize, what: &str| {
        Error::Data(format!("{origin}: offset {offset}: {what}"))
    };
    if bytes.len() < 12 {
        return Err(fail(0, "truncated header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail(0, "bad magic (expected GSTN)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(4, &format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dims_end = 12 + rank * 8;
    if bytes.len() < dims_end {
        return Err(fail(12, "truncated dims"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 12 + i * 8;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail(off, "zero dimension"));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let want = numel * 8;
    if bytes.len() - dims_end != want {
        return Err(fail(
            dims_end,
            &format!(
                "payload is {} bytes, shape {:?} wants {}",
                bytes.len() - dims_end,
                shape,
                want
            ),
        ));
    }
    let mut vals = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = dims_end + i * 8;
        vals.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
    }
    Ok((shape, vals))
}

pub fn save(path: &Path, shape: &[usize], vals: &[f64]) -> Result<()> {
    let bytes = encode(shape, vals);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}
