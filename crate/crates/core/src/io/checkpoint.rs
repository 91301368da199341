use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ZSIVCKPT";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;

/// Named tensors plus a free-form metadata document.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    /// Byte length in the payload.
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("{} checkpoint has no tensor {name}", self.kind)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let bytes = 8 * t.len() as u64;
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes,
            });
            offset += bytes;
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(HEADER + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `path` only labels errors. Every structural
    /// check runs before any tensor is built.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let meta_end = (HEADER as u64)
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| bad(format!("metadata length {meta_len} runs past the end of the file")))?
            as usize;
        let header: Header =
            serde_json::from_slice(&bytes[HEADER..meta_end]).map_err(|e| bad(format!("metadata: {e}")))?;
        let payload = &bytes[meta_end..];
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
                .and_then(|c| c.checked_mul(8))
                .ok_or_else(|| bad(format!("tensor {} size overflows", e.name)))?;
            if count != e.bytes {
                return Err(bad(format!("tensor {} declares {} bytes for shape {:?}", e.name, e.bytes, e.shape)));
            }
            let end = e
                .offset
                .checked_add(e.bytes)
                .ok_or_else(|| bad(format!("tensor {} offset overflows", e.name)))?;
            if end > payload.len() as u64 {
                return Err(bad(format!("truncated payload: tensor {} ends at byte {end} of {}", e.name, payload.len())));
            }
            spans.push((e.offset, end, &e.name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        let used: u64 = header.tensors.iter().map(|e| e.bytes).sum();
        if used != payload.len() as u64 {
            return Err(bad(format!("payload holds {} bytes, tensors use {used}", payload.len())));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.bytes) as usize];
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingCheckpoint(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    Checkpoint::from_bytes(&bytes, path)
}
