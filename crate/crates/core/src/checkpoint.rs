//! Checkpoints: a flat little-endian `f64` parameter file plus a JSON
//! manifest naming each tensor and the configuration that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TipsError};
use crate::model::{ModelConfig, TipsModel};
use crate::numerics::Tensor2;
use crate::objective::Mode;

pub const FORMAT: &str = "tips-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in `f64` values from the start of the parameter file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub training_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub model: ModelConfig,
    pub n_items: usize,
    pub best_epoch: usize,
    pub best_val_hr10: Option<f64>,
    pub params_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// What the caller knows about a checkpoint before it is written.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub training_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub model: ModelConfig,
    pub best_epoch: usize,
    pub best_val_hr10: f64,
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(dir: &Path, model: &TipsModel, info: &CheckpointInfo) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| TipsError::io(dir, e))?;
    let reg = &model.params;
    let mut bytes = Vec::with_capacity(reg.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(reg.len());
    let mut offset = 0;
    for id in reg.ids() {
        let t = reg.value(id);
        tensors.push(TensorEntry {
            name: reg.name(id).to_string(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
        });
        offset += t.data().len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        training_hash: info.training_hash.clone(),
        seed: info.seed,
        mode: info.mode,
        model: info.model.clone(),
        n_items: model.layout.emb.n_items,
        best_epoch: info.best_epoch,
        best_val_hr10: info.best_val_hr10.is_finite().then_some(info.best_val_hr10),
        params_sha256: hex(&bytes),
        tensors,
    };
    let p = dir.join(PARAMS_FILE);
    std::fs::write(&p, &bytes).map_err(|e| TipsError::io(&p, e))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| TipsError::Serde(e.to_string()))?;
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, json).map_err(|e| TipsError::io(&p, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| TipsError::io(&p, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| TipsError::CheckpointMismatch(format!("{}: {e}", p.display())))?;
    if m.format != FORMAT {
        return Err(TipsError::CheckpointMismatch(format!("unknown format {:?}", m.format)));
    }
    Ok(m)
}

/// Loads a checkpoint. With `expected_hash`, refuses checkpoints trained
/// under a different configuration.
pub fn load(dir: &Path, expected_hash: Option<&str>) -> Result<(TipsModel, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    if let Some(h) = expected_hash {
        if h != m.training_hash {
            return Err(TipsError::CheckpointMismatch(format!(
                "checkpoint was trained with config {} but the current config hashes to {h}",
                m.training_hash
            )));
        }
    }
    let p = dir.join(PARAMS_FILE);
    let bytes = std::fs::read(&p).map_err(|e| TipsError::io(&p, e))?;
    if hex(&bytes) != m.params_sha256 {
        return Err(TipsError::CheckpointMismatch(format!("{} does not match its manifest", p.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut model = TipsModel::new(&m.model, m.n_items, m.seed)?;
    if m.tensors.len() != model.params.len() {
        return Err(TipsError::CheckpointMismatch(format!(
            "checkpoint has {} tensors, model expects {}",
            m.tensors.len(),
            model.params.len()
        )));
    }
    for e in &m.tensors {
        let id = model
            .params
            .id(&e.name)
            .ok_or_else(|| TipsError::CheckpointMismatch(format!("unknown tensor {:?}", e.name)))?;
        let end = e.offset + e.rows * e.cols;
        if end > values.len() {
            return Err(TipsError::CheckpointMismatch(format!("tensor {:?} runs past the file", e.name)));
        }
        let t = Tensor2::from_vec(e.rows, e.cols, values[e.offset..end].to_vec())?;
        if t.shape() != model.params.value(id).shape() {
            return Err(TipsError::CheckpointMismatch(format!(
                "tensor {:?} has shape {:?}, model expects {:?}",
                e.name,
                t.shape(),
                model.params.value(id).shape()
            )));
        }
        model.params.set_value(id, t)?;
    }
    Ok((model, m))
}
