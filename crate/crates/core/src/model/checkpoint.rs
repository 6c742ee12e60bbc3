//! Binary checkpoint format.
//!
//! ```text
//! magic "CTXSEQCK" | u32 version
//! u32 len | ModelConfig JSON
//! u32 len | metadata JSON
//! u32 count | { u32 len | name | u8 rank | u64 dims[rank] | f64 payload }*
//! ```
//! All integers and floats are little endian.

use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::network::Model;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CTXSEQCK";
pub const VERSION: u32 = 1;

/// Upper bound on any single length field, to fail fast on corrupt input.
const MAX_FIELD: usize = 1 << 31;

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, metadata: &serde_json::Value) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for blob in [serde_json::to_vec(model.config())?, serde_json::to_vec(metadata)?] {
        w.write_all(&(blob.len() as u32).to_le_bytes())?;
        w.write_all(&blob)?;
    }
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    if n > MAX_FIELD {
        return Err(corrupt(format!("{what}: implausible length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| corrupt(format!("truncated checkpoint reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, serde_json::Value)> {
    if read_exact(&mut r, 8, "magic")? != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32(&mut r, "config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(&read_exact(&mut r, n, "config")?)?;
    let n = read_u32(&mut r, "metadata length")? as usize;
    let metadata: serde_json::Value = serde_json::from_slice(&read_exact(&mut r, n, "metadata")?)?;

    let count = read_u32(&mut r, "parameter count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = read_u32(&mut r, "name length")? as usize;
        let name =
            String::from_utf8(read_exact(&mut r, n, "name")?).map_err(|_| corrupt("parameter name is not UTF-8"))?;
        let rank = read_exact(&mut r, 1, "rank")?[0] as usize;
        if rank > crate::tensor::MAX_RANK {
            return Err(corrupt(format!("{name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = read_exact(&mut r, 8, "dims")?;
            shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        }
        let len = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("{name}: shape {shape:?} overflows")))?;
        let bytes = read_exact(&mut r, len, &name)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
        store.push(name, t).map_err(|e| corrupt(e.to_string()))?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after last parameter"));
    }
    Ok((Model::from_parts(config, store)?, metadata))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, metadata: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, metadata)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, serde_json::Value)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
