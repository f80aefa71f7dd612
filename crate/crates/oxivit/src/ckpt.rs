//! Checkpoint persistence: a JSON manifest indexing a raw little-endian f64
//! tensor blob. Reload reproduces parameters bitwise. Blob precision matches
//! compute precision; nothing is quantized.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTParams};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Training-state metadata carried alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub rng_seed: u64,
    /// ChaCha word position, decimal-encoded (u128 does not fit JSON numbers)
    pub rng_word_pos: String,
}

impl CheckpointMeta {
    pub fn new(step: u64, rng_seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            step,
            rng_seed,
            rng_word_pos: "0".to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// byte offset into the blob
    offset: u64,
    /// byte length
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ViTConfig,
    config_hash: String,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// SHA-256 of the config's canonical JSON form, hex-encoded.
pub fn config_hash(config: &ViTConfig) -> String {
    let json = serde_json::to_string(config).expect("config is serializable");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.json` + `weights.bin` into `dir` (created if missing).
pub fn save_checkpoint(params: &ViTParams, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = params.named_tensors();
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, tensor) in named {
        let offset = blob.len() as u64;
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset,
            len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        config_hash: config_hash(&params.config),
        meta: meta.clone(),
        tensors,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(
        &mpath,
        serde_json::to_string_pretty(&manifest).expect("manifest is serializable"),
    )
    .map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))
}

/// Reads a checkpoint back; parameters reproduce bitwise. Validates the
/// format version, every tensor extent, total blob coverage, and the stored
/// config hash.
pub fn load_checkpoint(dir: &Path) -> Result<(ViTParams, CheckpointMeta)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let stored_hash = config_hash(&manifest.config);
    if stored_hash != manifest.config_hash {
        return Err(Error::Format(format!(
            "manifest config hash {} does not match its config (recomputed {})",
            manifest.config_hash, stored_hash
        )));
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let expected_total: u64 = manifest.tensors.iter().map(|t| t.len).sum();
    if blob.len() as u64 != expected_total {
        return Err(Error::Format(format!(
            "weights blob holds {} bytes, manifest expects {expected_total}",
            blob.len()
        )));
    }

    // skeleton defines the expected tensor set; fill it by name
    let mut params = ViTParams::init(&manifest.config, 0)?;
    let mut entries: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    for (name, tensor) in params.named_tensors_mut() {
        let entry = entries.remove(name.as_str()).ok_or_else(|| {
            Error::Format(format!("manifest is missing tensor {name}"))
        })?;
        if entry.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > blob.len() || entry.len as usize != tensor.numel() * 8 {
            return Err(Error::Format(format!(
                "tensor {name} extent {start}..{end} inconsistent with blob of {}",
                blob.len()
            )));
        }
        let values: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *tensor = Tensor::new(tensor.shape().to_vec(), values)?;
    }
    if let Some(extra) = entries.keys().next() {
        return Err(Error::Format(format!("manifest holds unknown tensor {extra}")));
    }
    Ok((params, manifest.meta))
}

/// Loads a checkpoint and refuses configs other than the requested one,
/// printing both hashes.
pub fn load_checkpoint_matching(
    dir: &Path,
    expected: &ViTConfig,
) -> Result<(ViTParams, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(dir)?;
    let got = config_hash(&params.config);
    let want = config_hash(expected);
    if got != want {
        return Err(Error::Format(format!(
            "checkpoint config hash {got} does not match requested config hash {want}"
        )));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(seed: u64) -> ViTParams {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            dropout: 0.0,
        };
        ViTParams::init(&cfg, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let params = tiny_params(99);
        let meta = CheckpointMeta::new(123, 7);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, &meta, dir.path()).unwrap();
        let (loaded, got_meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(got_meta, meta);
        for ((na, ta), (nb, tb)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(na, &nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{na}");
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let params = tiny_params(1);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, &CheckpointMeta::new(0, 0), dir.path()).unwrap();
        let wpath = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&wpath).unwrap();
        fs::write(&wpath, &bytes[..bytes.len() - 1]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let params = tiny_params(1);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, &CheckpointMeta::new(0, 0), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&mpath, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn config_mismatch_prints_both_hashes() {
        let params = tiny_params(1);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, &CheckpointMeta::new(0, 0), dir.path()).unwrap();
        let other = ViTConfig::default();
        let err = load_checkpoint_matching(dir.path(), &other)
            .unwrap_err()
            .to_string();
        assert!(err.contains(&config_hash(&params.config)), "{err}");
        assert!(err.contains(&config_hash(&other)), "{err}");
    }

    #[test]
    fn hash_is_config_sensitive() {
        let a = ViTConfig::default();
        let mut b = ViTConfig::default();
        b.depth = 5;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a), config_hash(&ViTConfig::default()));
    }
}
