//! Model serialization.
//!
//! A checkpoint is a single JSON document: a version tag, the model config,
//! and one entry per parameter carrying its name, shape, and values. Values
//! are hex-encoded little-endian f64 bytes, so a save/load cycle restores
//! every parameter bit for bit; decimal text would need round-trip-safe
//! formatting everywhere, raw hex sidesteps the question.

use crate::model::{init_model, ModelConfig, ModelError, VimcanModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    IoError(#[from] std::io::Error),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CkptFile {
    version: u32,
    config: ModelConfig,
    params: Vec<CkptParam>,
}

fn encode_values(t: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(t.data().len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    hex::encode(bytes)
}

fn decode_values(name: &str, s: &str) -> Result<Vec<f64>, CheckpointError> {
    let bytes = hex::decode(s)
        .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Malformed(format!(
            "{name}: {} bytes is not a whole number of values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_checkpoint(m: &VimcanModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let params = m
        .arena
        .iter()
        .map(|(_, name, t)| CkptParam {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: encode_values(t),
        })
        .collect();
    let file = CkptFile { version: CHECKPOINT_VERSION, config: m.cfg.clone(), params };
    let text = serde_json::to_string(&file)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VimcanModel, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let file: CkptFile =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch(format!(
            "file version {}, supported {CHECKPOINT_VERSION}",
            file.version
        )));
    }
    let mut model = init_model(&file.config, 0).map_err(|e| match e {
        ModelError::InvalidConfig(m) => CheckpointError::Malformed(format!("config: {m}")),
        other => CheckpointError::Malformed(other.to_string()),
    })?;
    let mut stored: HashMap<&str, &CkptParam> =
        file.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let ids: Vec<_> = model.arena.iter().map(|(id, name, t)| {
        (id, name.to_string(), t.shape().to_vec())
    }).collect();
    for (id, name, shape) in ids {
        let entry = stored
            .remove(name.as_str())
            .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
        if entry.shape != shape {
            return Err(CheckpointError::Malformed(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                entry.shape, shape
            )));
        }
        let values = decode_values(&name, &entry.data)?;
        let t = Tensor::from_vec(&shape, values)
            .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        model.arena.set(id, t);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(CheckpointError::Malformed(format!("unknown parameter {extra}")));
    }
    Ok(model)
}

/// Load and insist the stored config equals `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<VimcanModel, CheckpointError> {
    let model = load_checkpoint(path)?;
    if &model.cfg != expected {
        return Err(CheckpointError::VersionMismatch(format!(
            "stored config {:?} does not match expected {:?}",
            model.cfg, expected
        )));
    }
    Ok(model)
}
