//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | content                                           |
//! |----------------|---------------------------------------------------|
//! | 0..8           | magic `PLCKPT01`                                  |
//! | 8..12          | `u32` length `m` of the metadata document         |
//! | 12..12+m       | UTF-8 JSON [`CheckpointMeta`]                      |
//! | 12+m..         | `f32` parameters, networks in metadata order, each |
//! |                | layer's weights `[O, C, k, k]` then its bias `[O]` |
//!
//! The file must end exactly after the last parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, ModelRole, ModelSet, Network};
use crate::autodiff::Real;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PLCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub role: ModelRole,
    pub arch: ArchSpec,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
    #[serde(default)]
    pub networks: Vec<NetworkEntry>,
    /// How the networks compose into a rollout, as written by the trainer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<serde_json::Value>,
}

fn format_error(offset: usize, message: impl Into<String>) -> Error {
    Error::FormatError { offset: offset as u64, message: message.into() }
}

pub fn encode_checkpoint<T: Real>(models: &ModelSet<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.networks = models
        .networks
        .iter()
        .map(|(role, net)| NetworkEntry { role: *role, arch: net.spec, parameters: net.parameter_count() })
        .collect();
    let doc = serde_json::to_vec(&meta).map_err(|e| Error::config("checkpoint metadata", e.to_string()))?;
    let total: usize = meta.networks.iter().map(|n| n.parameters).sum();
    let mut out = Vec::with_capacity(12 + doc.len() + 4 * total);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
    out.extend_from_slice(&doc);
    for net in models.networks.values() {
        for v in net.flat() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelSet<f32>, CheckpointMeta)> {
    if bytes.len() < 8 {
        return Err(format_error(bytes.len(), "truncated magic"));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_error(0, "not a checkpoint (bad magic)"));
    }
    let len_bytes: [u8; 4] = bytes.get(8..12).ok_or_else(|| format_error(bytes.len(), "truncated header"))?.try_into().unwrap();
    let m = u32::from_le_bytes(len_bytes) as usize;
    let doc = bytes.get(12..12 + m).ok_or_else(|| format_error(bytes.len(), "truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(doc).map_err(|e| format_error(12, format!("metadata: {e}")))?;
    let mut offset = 12 + m;
    let mut models = ModelSet::default();
    for entry in &meta.networks {
        let mut net = Network::<f32>::zeros(entry.arch);
        if net.parameter_count() != entry.parameters {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} declares {} parameters, its architecture has {}",
                entry.role.name(),
                entry.parameters,
                net.parameter_count()
            )));
        }
        let end = offset + 4 * entry.parameters;
        let block = bytes
            .get(offset..end)
            .ok_or_else(|| format_error(bytes.len(), format!("truncated parameters of {}", entry.role.name())))?;
        let values: Vec<f32> = block.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(format_error(offset + 4 * bad, "non-finite parameter"));
        }
        net.set_flat(&values)?;
        models.insert(entry.role, net);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format_error(offset, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((models, meta))
}

pub fn save_checkpoint<T: Real>(path: &Path, models: &ModelSet<T>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_checkpoint(models, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSet<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Checks that `models` provides `role` with exactly the `expected` layout.
pub fn expect_arch<T: Real>(models: &ModelSet<T>, role: ModelRole, expected: &ArchSpec) -> Result<()> {
    let net = models.require(role)?;
    if net.spec != *expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{}: checkpoint has {:?}, run expects {:?}",
            role.name(),
            net.spec,
            expected
        )));
    }
    Ok(())
}
