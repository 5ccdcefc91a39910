//! Checkpoint files: a JSON manifest next to a little-endian `f64` blob.
//!
//! `checkpoint.json` lists every parameter with its shape and byte offset into
//! `checkpoint.bin`. The manifest also embeds an arbitrary `model` description
//! so a checkpoint can be loaded without the config that produced it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub blob: String,
    pub blob_len: u64,
    pub model: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Serializes parameters in name order. Returns manifest and blob bytes.
pub fn encode_checkpoint(model: serde_json::Value, params: &dyn ParameterStore, blob_name: &str) -> (Vec<u8>, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in params.snapshot() {
        entries.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        blob.extend_from_slice(&t.to_le_bytes());
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        blob: blob_name.to_string(),
        blob_len: blob.len() as u64,
        model,
        params: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    (json, blob)
}

/// Parses and validates a manifest/blob pair.
pub fn decode_checkpoint(manifest: &[u8], blob: &[u8]) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let manifest: CheckpointManifest = serde_json::from_slice(manifest)
        .map_err(|e| Error::InvalidCheckpoint(format!("manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::InvalidCheckpoint(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.blob_len != blob.len() as u64 {
        return Err(Error::InvalidCheckpoint(format!(
            "blob has {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    let mut params = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for entry in &manifest.params {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::InvalidCheckpoint(format!("duplicate parameter `{}`", entry.name)));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::InvalidCheckpoint(format!("`{}`: shape overflows", entry.name)))?;
        let start = usize::try_from(entry.offset)
            .map_err(|_| Error::InvalidCheckpoint(format!("`{}`: offset out of range", entry.name)))?;
        let end = start
            .checked_add(count)
            .filter(|end| *end <= blob.len())
            .ok_or_else(|| Error::InvalidCheckpoint(format!("`{}`: extends past the blob", entry.name)))?;
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCheckpoint(format!("`{}` holds non-finite values", entry.name)));
        }
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((manifest, params))
}

pub fn write_checkpoint(manifest_path: &Path, model: serde_json::Value, params: &dyn ParameterStore) -> Result<()> {
    let bin = blob_path(manifest_path);
    let blob_name = bin
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidCheckpoint(format!("bad checkpoint path {}", manifest_path.display())))?
        .to_string();
    let (json, blob) = encode_checkpoint(model, params, &blob_name);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path, e))?;
    Ok(())
}

pub fn read_checkpoint(manifest_path: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let json = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let peek: CheckpointManifest = serde_json::from_slice(&json).map_err(|e| Error::json(manifest_path, e))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    if peek.blob.contains('/') || peek.blob.contains('\\') || peek.blob == ".." {
        return Err(Error::InvalidCheckpoint(format!("blob name `{}` must be a bare file name", peek.blob)));
    }
    let bin = dir.join(&peek.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    decode_checkpoint(&json, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("a.weight".to_string(), Tensor::new(vec![2, 2], vec![1.0, -0.5, 1e-300, 3.25]).unwrap());
        m.insert("a.bias".to_string(), Tensor::from_vec(vec![0.1, 0.2]));
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let p = sample();
        write_checkpoint(&path, serde_json::json!({"arch": "toy"}), &p).unwrap();
        let (m, loaded) = read_checkpoint(&path).unwrap();
        assert_eq!(m.model["arch"], "toy");
        assert_eq!(loaded, p);
    }

    #[test]
    fn truncated_blob_rejected() {
        let (json, blob) = encode_checkpoint(serde_json::Value::Null, &sample(), "x.bin");
        assert!(decode_checkpoint(&json, &blob[..blob.len() - 8]).is_err());
        assert!(decode_checkpoint(b"{not json", &blob).is_err());
    }

    #[test]
    fn offsets_checked() {
        let (json, blob) = encode_checkpoint(serde_json::Value::Null, &sample(), "x.bin");
        let mut m: CheckpointManifest = serde_json::from_slice(&json).unwrap();
        m.params[0].offset = u64::MAX - 3;
        let bad = serde_json::to_vec(&m).unwrap();
        assert!(decode_checkpoint(&bad, &blob).is_err());
    }
}
