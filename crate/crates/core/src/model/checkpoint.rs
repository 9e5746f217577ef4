//! Checkpoint directory layout: `checkpoint.json` (config, tokenizer hash,
//! tensor table, weight digest) and `weights.bin` (little-endian `f32`
//! tensors concatenated in table order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams, Variant};
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "headbias-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `weights.bin`, in floats.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: ModelConfig,
    pub tokenizer_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub num_floats: usize,
    pub weights_sha256: String,
}

/// Write `params` into `dir` (created if missing). Returns the manifest.
pub fn save_checkpoint(params: &ModelParams<f32>, tokenizer_hash: &str, dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    params.validate()?;
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(params.num_parameters() * 4);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for t in params.tensors() {
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            offset,
        });
        offset += t.data.len();
        for v in t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        config: params.config.clone(),
        tokenizer_hash: tokenizer_hash.to_string(),
        tensors,
        num_floats: offset,
        weights_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    fs::write(dir.join(CHECKPOINT_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Load a checkpoint, optionally insisting on a variant and tokenizer hash.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
    expect_variant: Option<Variant>,
    expect_tokenizer: Option<&str>,
) -> Result<(ModelParams<f32>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(CHECKPOINT_FILE);
    let corrupt = |path: &Path, reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(&manifest_path, format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(corrupt(&manifest_path, format!("unknown format {:?}", manifest.format)));
    }
    if let Some(v) = expect_variant {
        if manifest.config.variant != v {
            return Err(Error::VariantMismatch {
                expected: v.name(),
                found: manifest.config.variant.name(),
            });
        }
    }
    if let Some(h) = expect_tokenizer {
        if manifest.tokenizer_hash != h {
            return Err(Error::CheckpointMismatch(format!(
                "tokenizer hash {} does not match vocabulary {h}",
                manifest.tokenizer_hash
            )));
        }
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path)?;
    if bytes.len() != manifest.num_floats * 4 {
        return Err(corrupt(
            &weights_path,
            format!("expected {} bytes, found {} (truncated?)", manifest.num_floats * 4, bytes.len()),
        ));
    }
    if hex::encode(Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(corrupt(&weights_path, "weight digest does not match manifest".into()));
    }

    let mut params = ModelParams::<f32>::init(&manifest.config, 0)?;
    let shapes: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if shapes.len() != manifest.tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "config implies {} tensors, manifest lists {}",
            shapes.len(),
            manifest.tensors.len()
        )));
    }
    for ((name, shape), (entry, (_, dst))) in shapes.iter().zip(manifest.tensors.iter().zip(params.tensors_mut())) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let end = entry.offset + dst.len();
        if end > manifest.num_floats {
            return Err(corrupt(&manifest_path, format!("tensor {name} overruns the weight file")));
        }
        for (v, chunk) in dst.iter_mut().zip(bytes[entry.offset * 4..end * 4].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    if !params.all_finite() {
        return Err(corrupt(&weights_path, "non-finite weights".into()));
    }
    Ok((params, manifest))
}
