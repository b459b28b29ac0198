//! Versioned weight-file container.
//!
//! Layout: magic `SQLB`, u32 format version, u64 header length, a JSON
//! header (`kind`, kind-specific `meta`, and an ordered `arrays` index of
//! `{name, shape}`), then the arrays' raw little-endian f64 payloads in
//! index order. Floats round-trip bitwise.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{BackboneConfig, Checkpoint};

const MAGIC: &[u8; 4] = b"SQLB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

fn io_data_err(msg: String) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg))
}

pub fn write_container(
    path: &Path,
    kind: &str,
    meta: Value,
    arrays: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| io_data_err(format!("header serialization failed: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for t in arrays.values() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(String, Value, BTreeMap<String, Tensor>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut offset = 0usize;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|e| io_data_err(format!("at byte offset {offset}: {e}")))?;
    offset += 4;
    if &magic != MAGIC {
        return Err(io_data_err(format!("at byte offset 0: bad magic {magic:?}")));
    }
    let mut v4 = [0u8; 4];
    file.read_exact(&mut v4).map_err(|e| io_data_err(format!("at byte offset {offset}: {e}")))?;
    offset += 4;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(io_data_err(format!(
            "at byte offset 4: unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut v8 = [0u8; 8];
    file.read_exact(&mut v8).map_err(|e| io_data_err(format!("at byte offset {offset}: {e}")))?;
    offset += 8;
    let header_len = u64::from_le_bytes(v8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| io_data_err(format!("at byte offset {offset}: {e}")))?;
    offset += header_len;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| io_data_err(format!("at byte offset 16: invalid header JSON: {e}")))?;

    let mut arrays = BTreeMap::new();
    for entry in &header.arrays {
        let numel: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; numel];
        for slot in data.iter_mut() {
            let mut b8 = [0u8; 8];
            file.read_exact(&mut b8).map_err(|e| {
                io_data_err(format!("at byte offset {offset}: array {:?}: {e}", entry.name))
            })?;
            offset += 8;
            *slot = f64::from_le_bytes(b8);
        }
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| io_data_err(format!("array {:?}: {e}", entry.name)))?;
        arrays.insert(entry.name.clone(), t);
    }
    Ok((header.kind, header.meta, arrays))
}

// ── Backbone checkpoints ────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    config: BackboneConfig,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = serde_json::to_value(CheckpointMeta {
        step: ckpt.step,
        config: ckpt.config.clone(),
    })
    .map_err(|e| io_data_err(format!("checkpoint meta: {e}")))?;
    write_container(path, "backbone-checkpoint", meta, &ckpt.params)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (kind, meta, arrays) = read_container(path)?;
    if kind != "backbone-checkpoint" {
        return Err(io_data_err(format!("expected a backbone checkpoint, found kind {kind:?}")));
    }
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| io_data_err(format!("checkpoint meta: {e}")))?;
    Ok(Checkpoint { step: meta.step, config: meta.config, params: arrays })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{init_backbone, AttentionMode, FeatureMode};

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let cfg = BackboneConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_seq_len: 6,
            attention_mode: AttentionMode::Causal,
            feature_mode: FeatureMode::LastToken,
            init_seed: 5,
        };
        let b = init_backbone(&cfg).unwrap();
        let ckpt = Checkpoint { step: 42, config: cfg, params: b.params().clone() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.params, ckpt.params);
        let reborn = loaded.backbone().unwrap();
        assert_eq!(reborn.weight_hash(), b.weight_hash());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"SQLB\x01\x00").unwrap();
        let err = read_container(&path).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("byte offset"), "message was: {msg}");
    }
}
