//! Parameter checkpoints: a magic line, a little-endian `u64` manifest
//! length, a JSON manifest, then every tensor as raw little-endian `f64`.
//!
//! ```text
//! ISAC-PARAMS v1\n
//! <u64 LE: manifest bytes>
//! {"meta": ..., "tensors": [{"group", "name", "rows", "cols", "offset"}, ...]}
//! <f64 LE values, tensors back to back in manifest order>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"ISAC-PARAMS v1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
    /// Offset in values (not bytes) from the start of the data block.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    groups: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn encode(meta: &serde_json::Value, stores: &[&ParamStore]) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for s in stores {
        for p in &s.params {
            tensors.push(TensorEntry { group: s.group.clone(), name: p.name.clone(), rows: p.value.rows, cols: p.value.cols, offset });
            offset += p.value.len();
        }
    }
    let manifest = Manifest { meta: meta.clone(), groups: stores.iter().map(|s| s.group.clone()).collect(), tensors };
    let header = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for s in stores {
        for p in &s.params {
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<ParamStore>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic line"))?;
    if rest.len() < 8 {
        return Err(bad("truncated manifest length"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let data = &rest[len..];
    if data.len() % 8 != 0 {
        return Err(bad("data block is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut stores: Vec<ParamStore> = manifest.groups.iter().map(|g| ParamStore::new(g)).collect();
    let mut expected = 0;
    for t in &manifest.tensors {
        let n = t.rows * t.cols;
        if t.offset != expected || t.offset + n > values.len() {
            return Err(bad(&format!("tensor {} lies outside the data block", t.name)));
        }
        expected += n;
        let store = stores
            .iter_mut()
            .find(|s| s.group == t.group)
            .ok_or_else(|| bad(&format!("tensor {} names unknown group {}", t.name, t.group)))?;
        store.add(&t.name, Tensor::from_vec(t.rows, t.cols, values[t.offset..t.offset + n].to_vec())?);
    }
    if expected != values.len() {
        return Err(bad("trailing values after the last tensor"));
    }
    Ok((manifest.meta, stores))
}

pub fn save(path: &Path, meta: &serde_json::Value, stores: &[&ParamStore]) -> Result<()> {
    let bytes = encode(meta, stores)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<ParamStore>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
