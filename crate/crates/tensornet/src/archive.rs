//! Named-tensor checkpoint archive.
//!
//! Layout (little-endian): magic `KBPT`, `u32` version, `u32` manifest length,
//! manifest JSON, `u32` tensor count, then per tensor `u32` name length, UTF-8
//! name, `u32` rank, `u32` extents and the `f32` payload.

use crate::{Result, Tensor, TensorError};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"KBPT";
pub const VERSION: u32 = 1;

fn put(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn len32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| TensorError::Archive(format!("{what} too large")))
}

pub fn write_archive<W: Write>(mut w: W, manifest: &serde_json::Value, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    put(&mut w, VERSION)?;
    let m = serde_json::to_vec(manifest).map_err(|e| TensorError::Archive(e.to_string()))?;
    put(&mut w, len32(m.len(), "manifest")?)?;
    w.write_all(&m)?;
    put(&mut w, len32(tensors.len(), "tensor count")?)?;
    for (name, t) in tensors {
        put(&mut w, len32(name.len(), "name")?)?;
        w.write_all(name.as_bytes())?;
        put(&mut w, len32(t.shape().len(), "rank")?)?;
        for &d in t.shape() {
            put(&mut w, len32(d, "extent")?)?;
        }
        let mut buf = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub type Archive = (serde_json::Value, Vec<(String, Tensor<f32>)>);

pub fn read_archive<R: Read>(mut r: R) -> Result<Archive> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Archive(format!("bad magic {magic:?}")));
    }
    let version = get(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Archive(format!("unsupported version {version}")));
    }
    let mut m = vec![0u8; get(&mut r)? as usize];
    r.read_exact(&mut m)?;
    let manifest = serde_json::from_slice(&m).map_err(|e| TensorError::Archive(e.to_string()))?;
    let count = get(&mut r)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let mut name = vec![0u8; get(&mut r)? as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Archive(e.to_string()))?;
        let rank = get(&mut r)?;
        if rank > 8 {
            return Err(TensorError::Archive(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| get(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok((manifest, tensors))
}
