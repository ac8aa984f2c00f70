//! Checkpoint files: magic, a JSON manifest, then every tensor as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unidec_core::decoder::{DecoderConfig, DecoderModel, LoraSpec, ModelKind, TaskShape};
use unidec_core::params::ParamGroup;
use unidec_core::tensor::Tensor;
use unidec_core::trainer::{CheckpointBundle, Stage};

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 8] = b"UNIDECK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: [usize; 2],
    /// Byte offset into the blob that follows the manifest.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub config: DecoderConfig,
    pub shape: TaskShape,
    pub kind: ModelKind,
    pub lora: Option<LoraSpec>,
    pub stage: Option<Stage>,
    pub steps: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn malformed(msg: impl Into<String>) -> CliError {
    CliError::Format { what: "checkpoint", msg: msg.into() }
}

pub fn encode(bundle: &CheckpointBundle) -> CliResult<Vec<u8>> {
    let m = &bundle.model;
    let mut blob = Vec::with_capacity(m.store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(m.store.len());
    for (_, p) in m.store.iter() {
        let (r, c) = p.value.shape();
        tensors.push(TensorEntry { name: p.name.clone(), group: p.group, shape: [r, c], offset: blob.len() });
        blob.extend_from_slice(&p.value.to_le_bytes());
    }
    let manifest = Manifest {
        dtype: "f64".into(),
        config: m.config.clone(),
        shape: m.shape.clone(),
        kind: m.kind,
        lora: m.lora.clone(),
        stage: bundle.stage,
        steps: bundle.steps,
        seed: bundle.seed,
        tensors,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| malformed(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> CliResult<CheckpointBundle> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes.get(16..16 + hlen).ok_or_else(|| malformed("truncated manifest"))?;
    let blob = &bytes[16 + hlen..];
    let manifest: Manifest = serde_json::from_slice(header).map_err(|e| malformed(e.to_string()))?;
    if manifest.dtype != "f64" {
        return Err(malformed(format!("unsupported dtype {}", manifest.dtype)));
    }
    // Rebuild the parameter set, then overwrite every tensor by name.
    let mut model = DecoderModel::new(manifest.config.clone(), manifest.shape.clone(), manifest.kind, 0)?;
    if let Some(spec) = &manifest.lora {
        model.apply_lora(spec, 0)?;
    }
    if model.store.len() != manifest.tensors.len() {
        return Err(malformed(format!("{} tensors for a model with {}", manifest.tensors.len(), model.store.len())));
    }
    for t in &manifest.tensors {
        let id = model.store.id(&t.name)?;
        let p = model.store.param(id);
        if p.group != t.group || p.value.shape() != (t.shape[0], t.shape[1]) {
            return Err(malformed(format!("{} does not match the model layout", t.name)));
        }
        let n = t.shape[0] * t.shape[1];
        let raw = blob.get(t.offset..t.offset + 8 * n).ok_or_else(|| malformed(format!("{} runs past the blob", t.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        *model.store.get_mut(id) = Tensor::from_vec(t.shape[0], t.shape[1], data);
    }
    Ok(CheckpointBundle { model, stage: manifest.stage, steps: manifest.steps, seed: manifest.seed })
}

/// Writes the checkpoint and returns the hex SHA-256 of the file.
pub fn save(bundle: &CheckpointBundle, path: &Path) -> CliResult<String> {
    let bytes = encode(bundle)?;
    std::fs::write(path, &bytes).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load(path: &Path) -> CliResult<CheckpointBundle> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    decode(&std::fs::read(path).map_err(CliError::io(path))?)
}
