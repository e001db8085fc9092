//! Checkpoint files.
//!
//! Layout: the 8-byte magic `SEMGCKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor's values as little-endian `f32`,
//! concatenated in the order listed by the header. The header carries the
//! model config, seed, training stage, the subjects the weights have seen,
//! and a directory of tensor names, shapes and byte offsets into the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{build_variant, ModelConfig, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEMGCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStage {
    Init,
    Stage1,
    Stage2,
    Adapted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub stage: CheckpointStage,
    /// Every subject whose windows have contributed gradients to these weights.
    pub exposed_subjects: Vec<u32>,
    pub params: ModelParams<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    seed: u64,
    stage: CheckpointStage,
    exposed_subjects: Vec<u32>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.params.tensors() {
            tensors.push(TensorEntry {
                name,
                shape: t.shape.clone(),
                offset: payload.len(),
                len: t.data.len(),
            });
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            stage: self.stage,
            exposed_subjects: self.exposed_subjects.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let payload = &body[hlen..];
        let mut params = build_variant::<f32>(&header.config, 0)?;
        let slots = params.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "header lists {} tensors, config implies {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        let mut expected_offset = 0;
        for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || slot.shape != entry.shape || slot.data.len() != entry.len {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match config slot {name} {:?}",
                    entry.name, entry.shape, slot.shape
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!("tensor {} has offset {}", entry.name, entry.offset)));
            }
            let end = entry.offset + 4 * entry.len;
            let raw = payload.get(entry.offset..end).ok_or_else(|| bad("truncated payload"))?;
            for (v, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            stage: header.stage,
            exposed_subjects: header.exposed_subjects,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
