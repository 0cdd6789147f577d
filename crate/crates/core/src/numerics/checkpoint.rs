//! Parameter checkpoint files.
//!
//! Layout: 8-byte magic `SYNCKPT1`, little-endian `u64` header length, a
//! JSON header, then the raw little-endian `f64` payload. The header lists
//! every array's name, shape and byte offset into the payload, plus a free
//! `meta` object for network configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"SYNCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// An in-memory checkpoint: named arrays in file order plus metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { arrays: Vec::new(), meta }
    }

    /// Appends every tensor of `params` under `prefix/`.
    pub fn push_set(&mut self, prefix: &str, params: &ParameterSet) {
        for (_, name, t) in params.iter() {
            let mut t = t.clone();
            t.set_grad(None);
            self.arrays.push((format!("{prefix}/{name}"), t));
        }
    }

    /// Overwrites `params` with the arrays stored under `prefix/`; every
    /// parameter must be present with a matching shape.
    pub fn restore_set(&self, prefix: &str, params: &mut ParameterSet) -> Result<(), NumericsError> {
        let ids: Vec<_> = params.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        for (id, name) in ids {
            let key = format!("{prefix}/{name}");
            let stored = self
                .arrays
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing array {key}")))?;
            let dst = params.get_mut(id);
            if stored.shape() != dst.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "{key}: stored shape {:?}, expected {:?}",
                    stored.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header { version: FORMAT_VERSION, arrays, meta: self.meta.clone() };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize.checked_add(hlen).ok_or_else(|| bad("header length"))?;
        if bytes.len() < payload_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| NumericsError::Checkpoint(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(NumericsError::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[payload_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(bad("truncated payload"));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self { arrays, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
