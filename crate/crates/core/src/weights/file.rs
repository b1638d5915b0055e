//! Flat little-endian weight file.
//!
//! ```text
//! "EFFHW001"                 8 bytes
//! entry count                u32
//! repeated:
//!   name length, name        u32, UTF-8 bytes
//!   rank, dims               u32, u32 × rank
//!   payload                  f32 × product(dims), row-major
//! ```

use std::collections::HashSet;
use std::path::Path;

use super::ParamStore;
use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EFFHW001";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightFile {
    entries: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|(n, t)| 12 + n.len() + 4 * (t.rank() + t.len()))
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}`: dims overflow")))?;
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("payload overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::new(entries)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated: wanted {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Snapshot of every tensor in store order. Trainable flags are not stored.
pub fn save(store: &ParamStore) -> WeightFile {
    WeightFile {
        entries: store.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect(),
    }
}

/// Loads exactly the tensors `spec` needs. Every loaded layer is trainable.
pub fn load(file: &WeightFile, spec: &ArchSpec) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for layer in spec.layers() {
        for (name, shape) in layer.tensors() {
            let t = file.get(&name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::DimMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            store.insert(name, t.clone(), true);
        }
    }
    if store.len() != file.len() {
        let extra = file
            .entries
            .iter()
            .find(|(n, _)| !store.contains(n))
            .map(|(n, _)| n.as_str())
            .unwrap_or_default();
        return Err(Error::Format(format!(
            "entry `{extra}` is not part of the architecture"
        )));
    }
    Ok(store)
}
