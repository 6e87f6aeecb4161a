//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 8            | magic `RIFCKPT\0`                        |
//! | 4            | format version (u32)                     |
//! | 8            | manifest length `L` (u64)                |
//! | L            | UTF-8 JSON [`Manifest`]                  |
//! | rest         | payload of f32 values                    |
//!
//! Tensor offsets are byte offsets into the payload. There is no checksum.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RIFCKPT\0";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recipe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    /// Length in bytes.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub deployed: bool,
    pub metadata: Metadata,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in model.params.named() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        spec: model.spec().clone(),
        deployed: model.is_deployed(),
        metadata: metadata.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Splits a checkpoint into its manifest and payload after validating the
/// preamble and tensor table.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| corrupt("manifest length exceeds file"))? as usize;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let payload = &bytes[header_end..];
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        if t.len != 4 * numel as u64 {
            return Err(corrupt(format!("{}: {} bytes for shape {:?}", t.name, t.len, t.shape)));
        }
        let end = t.offset.checked_add(t.len).ok_or_else(|| corrupt("offset overflow"))?;
        if end > payload.len() as u64 {
            return Err(corrupt(format!("{}: bytes {}..{end} beyond payload of {}", t.name, t.offset, payload.len())));
        }
        spans.push((t.offset, end, &t.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(corrupt(format!("{} overlaps {}", w[0].2, w[1].2)));
        }
    }
    Ok((manifest, payload))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Metadata)> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut template = Model::build(&manifest.spec, 0)?;
    if manifest.deployed {
        template = crate::reparam::switch_to_deploy(&template)?;
    }
    let by_name: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if by_name.len() != manifest.tensors.len() {
        return Err(corrupt("duplicate tensor names"));
    }
    let mut params = template.params.clone();
    let mut problem: Option<String> = None;
    let mut used = 0;
    params.visit_mut(|name, slot| {
        if problem.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name) else {
            problem = Some(format!("missing tensor {name}"));
            return;
        };
        if entry.shape != slot.shape() {
            problem = Some(format!("{name}: shape {:?}, model expects {:?}", entry.shape, slot.shape()));
            return;
        }
        let raw = &payload[entry.offset as usize..(entry.offset + entry.len) as usize];
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        *slot = Tensor::new(entry.shape.clone(), data).expect("validated length");
        used += 1;
    });
    if let Some(p) = problem {
        return Err(corrupt(p));
    }
    if used != manifest.tensors.len() {
        return Err(corrupt(format!("{} tensors in file, model uses {used}", manifest.tensors.len())));
    }
    Ok((Model::from_params(&manifest.spec, params)?, manifest.metadata))
}

pub fn save_checkpoint(model: &Model, metadata: &Metadata, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, metadata)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Metadata)> {
    from_bytes(&fs::read(path)?)
}

pub fn inspect_checkpoint(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path)?;
    Ok(read_manifest(&bytes)?.0)
}
