//! Portable array files: `"HPA1"`, `ndim: u32`, `dims: [u32; ndim]`, then the
//! row-major `f32` payload, all little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HPA1";

pub fn encode_array(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let t = read_array_from(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::ArrayFormat(format!(
            "{} trailing bytes after payload",
            cursor.len()
        )));
    }
    Ok(t)
}

/// Reads one array record from a stream (records may be concatenated).
pub fn read_array_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::ArrayFormat("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::ArrayFormat(format!("bad magic {magic:?}")));
    }
    let ndim = read_u32(r)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(r)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; 4 * n];
    r.read_exact(&mut payload).map_err(|_| {
        Error::ArrayFormat(format!("payload shorter than 4·{n} bytes for dims {dims:?}"))
    })?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&dims, data)
}

/// Decodes a buffer holding zero or more concatenated records.
pub fn decode_arrays(mut bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        out.push(read_array_from(&mut bytes)?);
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::ArrayFormat("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_array_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&encode_array(t))?;
    Ok(())
}

pub fn write_array(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_array(t)).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes)
}
