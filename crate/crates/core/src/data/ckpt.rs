//! Bit-exact checkpoint container.
//!
//! Layout: magic "DFKD" | version u32 LE | header length u32 LE | header
//! (JSON text) | payload (raw little-endian f64 in manifest order) | FNV-1a
//! 64-bit checksum of the payload bytes. A round trip reproduces tensor
//! values bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

pub const MAGIC: [u8; 4] = *b"DFKD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    /// Model kind tag ("vit", "gan", "detr", "extractor", "synth", ...).
    pub kind: String,
    pub config: Value,
    pub manifest: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Map<String, Value>,
}

pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: serde_json::Map<String, Value>,
    pub weights: ModelWeights,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: Value,
    weights: &ModelWeights,
    meta: serde_json::Map<String, Value>,
) -> Result<()> {
    let mut manifest = Vec::with_capacity(weights.entries().len());
    let mut payload: Vec<u8> = Vec::with_capacity(weights.total_len() * 8);
    for (name, tensor) in weights.entries() {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
            trainable: tensor.requires_grad(),
        });
        for v in tensor.data().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header { kind: kind.to_string(), config, manifest, meta };
    let header_text = serde_json::to_string(&header)
        .map_err(|e| Error::parse(format!("serializing checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(12 + header_text.len() + payload.len() + 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_text.len() as u32).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    let checksum = fnv1a64(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 {
        return Err(CheckpointError::MalformedHeader {
            detail: format!("file is only {} bytes", bytes.len()),
        }
        .into());
    }
    if bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version == 0 || version > VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version, supported: VERSION }.into());
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(CheckpointError::MalformedHeader {
            detail: "header extends past end of file".to_string(),
        }
        .into());
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| CheckpointError::MalformedHeader { detail: e.to_string() })?;

    let payload_len: usize = header
        .manifest
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    let body = &bytes[12 + header_len..];
    // Truncation (or padding) shows up as a checksum failure, not a crash.
    if body.len() != payload_len + 8 {
        return Err(CheckpointError::ChecksumMismatch {
            expected: 0,
            computed: fnv1a64(&body[..body.len().min(payload_len)]),
        }
        .into());
    }
    let payload = &body[..payload_len];
    let stored = u64::from_le_bytes(body[payload_len..].try_into().unwrap());
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { expected: stored, computed }.into());
    }

    let mut weights = ModelWeights::new();
    for entry in &header.manifest {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        if start + count * 8 > payload.len() {
            return Err(CheckpointError::MalformedHeader {
                detail: format!("tensor '{}' overruns payload", entry.name),
            }
            .into());
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = start + i * 8;
            data.push(f64::from_le_bytes(payload[at..at + 8].try_into().unwrap()));
        }
        let tensor = if entry.trainable {
            Tensor::param(entry.shape.clone(), data)?
        } else {
            Tensor::from_vec(entry.shape.clone(), data)?
        };
        weights.insert(entry.name.clone(), tensor)?;
    }
    Ok(Checkpoint { kind: header.kind, config: header.config, meta: header.meta, weights })
}

/// Short content id over the weight payload, recorded in provenance blocks.
pub fn weights_content_id(weights: &ModelWeights) -> String {
    let mut payload: Vec<u8> = Vec::with_capacity(weights.total_len() * 8);
    for (_, tensor) in weights.entries() {
        for v in tensor.data().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    format!("{:016x}", fnv1a64(&payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_weights() -> ModelWeights {
        let mut w = ModelWeights::new();
        w.insert("a.weight", Tensor::param(vec![2, 3], vec![1.5, -2.25, 0.1, 4.0, 5.0, -6.5]).unwrap())
            .unwrap();
        w.insert("a.buffer", Tensor::from_vec(vec![2], vec![0.25, 0.75]).unwrap()).unwrap();
        w
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dfkd_ckpt_tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let w = sample_weights();
        let path = tmp("rt.ckpt");
        save_checkpoint(&path, "demo", json!({"k": 1}), &w, Default::default()).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind, "demo");
        assert_eq!(loaded.config["k"], 1);
        assert_eq!(loaded.weights.names(), w.names());
        for (name, t) in w.entries() {
            let l = loaded.weights.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            assert_eq!(l.requires_grad(), t.requires_grad());
            for (a, b) in l.data().iter().zip(t.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_version_checksum_are_distinct() {
        let w = sample_weights();
        let path = tmp("mutate.ckpt");
        save_checkpoint(&path, "demo", json!({}), &w, Default::default()).unwrap();
        let original = fs::read(&path).unwrap();

        let mut bad_magic = original.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))
        ));

        let mut bad_version = original.clone();
        bad_version[4] = 99;
        fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion { found: 99, .. }))
        ));

        let mut flipped = original.clone();
        let n = flipped.len();
        flipped[n - 12] ^= 0xFF; // corrupt payload tail
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::ChecksumMismatch { .. }))
        ));

        // Truncation is reported as a checksum failure, not a panic.
        fs::write(&path, &original[..n - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(CheckpointError::ChecksumMismatch { .. }))
        ));
    }

    #[test]
    fn content_id_tracks_values() {
        let w = sample_weights();
        let id1 = weights_content_id(&w);
        let id2 = weights_content_id(&w);
        assert_eq!(id1, id2);
        let w2 = {
            let mut m = ModelWeights::new();
            m.insert("a.weight", Tensor::param(vec![2, 3], vec![0.0; 6]).unwrap()).unwrap();
            m.insert("a.buffer", Tensor::from_vec(vec![2], vec![0.25, 0.75]).unwrap()).unwrap();
            m
        };
        assert_ne!(id1, weights_content_id(&w2));
    }
}
