//! Code-embedding providers.
//!
//! The hash provider is a dependency-free stand-in for a pretrained code
//! encoder; the file provider serves precomputed vectors by exact key.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("no embedding for code key `{0}`")]
    MissingKey(String),
    #[error("embedding file declares dim {found}, configuration expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("embedding file truncated: {0}")]
    Truncated(String),
    #[error("embedding file has {rows} rows but {keys} keys")]
    KeyCount { rows: usize, keys: usize },
    #[error("duplicate embedding key `{0}`")]
    DuplicateKey(String),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hash,
    File,
}

#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    Hash(HashEncoder),
    File(FileEncoder),
}

impl EmbeddingProvider {
    pub fn hash(dim: usize) -> Result<Self, EncoderError> {
        Ok(Self::Hash(HashEncoder::new(dim)?))
    }

    pub fn kind(&self) -> ProviderKind {
        match self {
            Self::Hash(_) => ProviderKind::Hash,
            Self::File(_) => ProviderKind::File,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Hash(h) => h.dim,
            Self::File(f) => f.dim,
        }
    }

    pub fn encode(&self, code: &str) -> Result<Vec<f64>, EncoderError> {
        match self {
            Self::Hash(h) => Ok(h.encode(code)),
            Self::File(f) => f.lookup(code).map(<[f64]>::to_vec),
        }
    }
}

/// Signed feature hashing of alphanumeric tokens into `dim` buckets, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    dim: usize,
}

impl HashEncoder {
    pub fn new(dim: usize) -> Result<Self, EncoderError> {
        if dim == 0 {
            return Err(EncoderError::ZeroDim);
        }
        Ok(Self { dim })
    }

    pub fn encode(&self, code: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(code) {
            let h = fnv1a64(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }
}

/// Splits on every non-alphanumeric character, dropping empty pieces.
pub fn tokenize(code: &str) -> Vec<&str> {
    code.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect()
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Exact-key lookup table loaded from an embedding file.
#[derive(Debug, Clone, Default)]
pub struct FileEncoder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileEncoder {
    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self, EncoderError> {
        if dim == 0 {
            return Err(EncoderError::ZeroDim);
        }
        let mut table = HashMap::new();
        for (k, v) in rows {
            if v.len() != dim {
                return Err(EncoderError::DimMismatch { expected: dim, found: v.len() });
            }
            if table.insert(k.clone(), v).is_some() {
                return Err(EncoderError::DuplicateKey(k));
            }
        }
        Ok(Self { dim, table })
    }

    pub fn lookup(&self, key: &str) -> Result<&[f64], EncoderError> {
        self.table.get(key).map(Vec::as_slice).ok_or_else(|| EncoderError::MissingKey(key.to_string()))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Path of the key file that accompanies an embedding file.
pub fn keys_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".keys");
    PathBuf::from(s)
}

/// Writes `[u64 count][u64 dim]` then `count × dim` little-endian `f32`s,
/// plus one key per line in the sidecar file.
pub fn save_embeddings(path: &Path, dim: usize, rows: &[(String, Vec<f64>)]) -> Result<(), EncoderError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(rows.len() as u64).to_le_bytes())?;
    out.write_all(&(dim as u64).to_le_bytes())?;
    for (_, v) in rows {
        if v.len() != dim {
            return Err(EncoderError::DimMismatch { expected: dim, found: v.len() });
        }
        for &x in v {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    let mut keys = BufWriter::new(File::create(keys_path(path))?);
    for (k, _) in rows {
        writeln!(keys, "{k}")?;
    }
    keys.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<FileEncoder, EncoderError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(EncoderError::Truncated(format!("header needs 16 bytes, file has {}", bytes.len())));
    }
    let count = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let dim = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(EncoderError::DimMismatch { expected, found: dim });
        }
    }
    let needed = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).map(|n| n + 16);
    if needed != Some(bytes.len()) {
        return Err(EncoderError::Truncated(format!("{count} rows of dim {dim} need {:?} bytes, file has {}", needed, bytes.len())));
    }
    let keys: Vec<String> = BufReader::new(File::open(keys_path(path))?).lines().collect::<Result<_, _>>()?;
    if keys.len() != count {
        return Err(EncoderError::KeyCount { rows: count, keys: keys.len() });
    }
    let rows = keys.into_iter().enumerate().map(|(r, k)| {
        let start = 16 + r * dim * 4;
        let v = (0..dim)
            .map(|c| {
                let o = start + c * 4;
                f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as f64
            })
            .collect();
        (k, v)
    });
    FileEncoder::from_rows(dim.max(1), rows).map(|mut f| {
        f.dim = dim;
        f
    })
}
