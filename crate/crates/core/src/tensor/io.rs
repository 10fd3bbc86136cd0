//! VRT1: magic `b"VRT1"`, `u32` rank, `rank` × `u32` extents, then the
//! payload as little-endian `f32`. All integers little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const VRT1_MAGIC: &[u8; 4] = b"VRT1";

pub fn write_vrt1<T: Element, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(VRT1_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Parses a VRT1 byte stream. A bad magic is a format error; a short
/// payload surfaces as an io error.
pub fn read_vrt1<T: Element, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let io = |e| Error::io("<stream>", e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != VRT1_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}, expected VRT1")));
    }
    let mut word = [0u8; 4];
    let mut next = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut word).map_err(io)?;
        Ok(u32::from_le_bytes(word) as usize)
    };
    let rank = next(&mut r)?;
    let shape = (0..rank).map(|_| next(&mut r)).collect::<Result<Vec<_>>>()?;
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * 4];
    r.read_exact(&mut payload).map_err(io)?;
    let data = payload.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_vrt1(t, &mut bytes).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_vrt1(&bytes[..]).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}
