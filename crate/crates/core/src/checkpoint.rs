//! Versioned named-slot binary checkpoints.
//!
//! Layout (little-endian): `CODACKPT`, `u32` version, `u64` metadata length,
//! metadata JSON, `u64` slot count, then per slot: `u32` name length, name,
//! `u8` frozen flag, `u32` rank, `u64` dims, row-major `f64` values.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::numerics::ParamStore;

pub const MAGIC: &[u8; 8] = b"CODACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<M> {
    pub metadata: M,
    pub params: ParamStore<f64>,
}

pub fn to_bytes<M: Serialize>(metadata: &M, params: &ParamStore<f64>) -> Result<Vec<u8>, CheckpointError> {
    let meta = serde_json::to_vec(metadata)?;
    let mut out = Vec::with_capacity(64 + meta.len() + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for s in params.slots() {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(u8::from(s.frozen));
        out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for &d in &s.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &s.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Invalid("length overflow".into()))
    }
}

pub fn from_bytes<M: DeserializeOwned>(bytes: &[u8]) -> Result<Checkpoint<M>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let meta_len = r.len()?;
    let metadata = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.len()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| CheckpointError::Invalid(format!("slot name: {e}")))?;
        let frozen = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CheckpointError::Invalid("shape overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(&name, &shape, data).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        if frozen {
            params.set_frozen(&name, true).expect("slot just inserted");
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { metadata, params })
}

pub fn save<M: Serialize>(path: &Path, metadata: &M, params: &ParamStore<f64>) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(metadata, params)?)?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<Checkpoint<M>, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_slots_and_flags() {
        let mut p = ParamStore::<f64>::new();
        p.insert("a.w", &[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        p.insert("b", &[1], vec![7.0]).unwrap();
        p.set_frozen("b", true).unwrap();
        let meta = serde_json::json!({"seed": 3});
        let bytes = to_bytes(&meta, &p).unwrap();
        let c: Checkpoint<serde_json::Value> = from_bytes(&bytes).unwrap();
        assert_eq!(c.metadata, meta);
        assert_eq!(c.params, p);
        assert_eq!(to_bytes(&c.metadata, &c.params).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = ParamStore::<f64>::new();
        let bytes = to_bytes(&1u8, &p).unwrap();
        assert!(matches!(from_bytes::<u8>(b"NOTACKPT"), Err(CheckpointError::BadMagic)));
        assert!(matches!(from_bytes::<u8>(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated(_))));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(from_bytes::<u8>(&v), Err(CheckpointError::Version(9))));
    }
}
