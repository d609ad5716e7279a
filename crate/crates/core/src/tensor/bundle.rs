//! Binary tensor container used for checkpoints.
//!
//! Layout: the 8-byte magic `ADVAGE01`, a little-endian `u64` header length,
//! a JSON header (caller metadata plus the ordered tensor manifest), then every
//! tensor's values as little-endian `f64` in manifest order. Values are stored
//! by bit pattern, so a save/load cycle is exact.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::param::Matrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ADVAGE01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub meta: serde_json::Value,
    tensors: Vec<(String, Matrix)>,
}

impl TensorBundle {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.push((name.into(), value));
    }

    /// Add every tensor with `prefix.` prepended to its name.
    pub fn extend_prefixed(&mut self, prefix: &str, items: Vec<(String, Matrix)>) {
        for (name, m) in items {
            self.push(format!("{prefix}.{name}"), m);
        }
    }

    pub fn tensors(&self) -> &[(String, Matrix)] {
        &self.tensors
    }

    pub fn manifest(&self) -> Vec<TensorEntry> {
        self.tensors
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Tensors under `prefix.` with the prefix stripped.
    pub fn prefixed(&self, prefix: &str) -> HashMap<String, Matrix> {
        let lead = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(&lead).map(|rest| (rest.to_string(), m.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: self.manifest(),
        })?;
        let n_values: usize = self.tensors.iter().map(|(_, m)| m.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not an advage tensor bundle".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        let mut pos = body_start;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let [r, c] = entry.shape;
            let n = r * c;
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
            }
            let values: Vec<f64> = bytes[pos..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            pos = end;
            let m = Matrix::from_shape_vec((r, c), values).expect("length matches shape");
            tensors.push((entry.name, m));
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
