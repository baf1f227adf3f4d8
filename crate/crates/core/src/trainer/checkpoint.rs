//! Checkpoint container.
//!
//! ```text
//! "NPPCKPT\0" | u64 LE manifest length | manifest JSON | payload
//! ```
//!
//! The payload is raw little-endian f32/f64: parameters in layout order, then
//! AdamW first moments (`adam.m.<name>`), then second moments
//! (`adam.v.<name>`). The manifest indexes every buffer by name with its byte
//! offset into the payload and its shape, and carries the payload's SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamW, RunConfig, Trainer};
use crate::error::{NppError, Result};
use crate::tensor::{Array, Dtype, Float};
use crate::transformer::{Model, ModelConfig, Parameters};

pub const MAGIC: [u8; 8] = *b"NPPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: Dtype,
    pub step: u64,
    pub optimizer_step: u64,
    /// Decimal string; exceeds what JSON numbers carry safely.
    pub cum_flops: String,
    pub dataset_len: usize,
    pub run_config: RunConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode<T: Float>(trainer: &Trainer<T>) -> Result<Vec<u8>> {
    let params = trainer.model().params();
    let optim = trainer.optimizer();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let groups: [(&str, Vec<&Array<T>>); 3] = [
        ("", params.tensors().iter().map(|a| a.as_ref()).collect()),
        ("adam.m.", optim.first_moments().iter().collect()),
        ("adam.v.", optim.second_moments().iter().collect()),
    ];
    for (prefix, arrays) in groups {
        for (name, array) in params.names().iter().zip(arrays) {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                offset: payload.len() as u64,
                shape: array.shape().to_vec(),
            });
            for &x in array.data() {
                x.write_le(&mut payload);
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        step: trainer.step(),
        optimizer_step: optim.step(),
        cum_flops: trainer.cum_flops().to_string(),
        dataset_len: trainer.dataset_len(),
        run_config: trainer.config().clone(),
        tensors,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Float>(trainer: &Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(trainer)?).map_err(|e| NppError::io(path, e))
}

/// Splits a container into its manifest and verified payload.
pub fn decode_container(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || bytes[..8] != MAGIC {
        return Err(NppError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| NppError::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(NppError::Checkpoint(format!(
            "version mismatch: found {}, expected {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    let payload = &bytes[16 + len..];
    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(NppError::Checkpoint("checksum mismatch: payload is corrupt".into()));
    }
    Ok((manifest, payload))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| NppError::io(path, e))?;
    Ok(decode_container(&bytes)?.0)
}

fn tensor<T: Float>(manifest: &Manifest, payload: &[u8], name: &str, shape: &[usize]) -> Result<Array<T>> {
    let entry = manifest
        .tensors
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| NppError::Checkpoint(format!("missing tensor {name}")))?;
    if entry.shape != shape {
        return Err(NppError::Checkpoint(format!(
            "config mismatch: tensor {name} has shape {:?}, expected {shape:?}",
            entry.shape
        )));
    }
    let width = T::DTYPE.size();
    let count: usize = shape.iter().product();
    let start = entry.offset as usize;
    let bytes = payload
        .get(start..start + count * width)
        .ok_or_else(|| NppError::Checkpoint(format!("tensor {name} runs past the payload")))?;
    let data = bytes.chunks_exact(width).map(T::read_le).collect();
    Array::new(shape.to_vec(), data)
}

fn check_model(manifest: &Manifest, expected: Option<&ModelConfig>) -> Result<()> {
    if let Some(expected) = expected {
        if *expected != manifest.run_config.model {
            return Err(NppError::Checkpoint(format!(
                "config mismatch: checkpoint model {:?}, expected {expected:?}",
                manifest.run_config.model
            )));
        }
    }
    Ok(())
}

fn load_params<T: Float>(manifest: &Manifest, payload: &[u8], prefix: &str) -> Result<Vec<Array<T>>> {
    if manifest.dtype != T::DTYPE {
        return Err(NppError::Checkpoint(format!(
            "dtype mismatch: checkpoint is {:?}, requested {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    manifest
        .run_config
        .model
        .param_layout()
        .iter()
        .map(|(name, shape)| tensor(manifest, payload, &format!("{prefix}{name}"), shape))
        .collect()
}

pub fn decode<T: Float>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Trainer<T>> {
    let (manifest, payload) = decode_container(bytes)?;
    check_model(&manifest, expected)?;
    let config = manifest.run_config.clone();
    let params = Parameters::from_tensors(&config.model, load_params(&manifest, payload, "")?)?;
    let m = load_params(&manifest, payload, "adam.m.")?;
    let v = load_params(&manifest, payload, "adam.v.")?;
    let optim = AdamW::from_parts(config.optimizer, &params, manifest.optimizer_step, m, v)?;
    let model = Model::from_parameters(config.model.clone(), params)?;
    let flops = manifest
        .cum_flops
        .parse()
        .map_err(|_| NppError::Checkpoint(format!("bad cum_flops {:?}", manifest.cum_flops)))?;
    Trainer::from_parts(config, manifest.dataset_len, model, optim, manifest.step, flops)
}

/// Full training state. With `expected`, a differing model config is an error.
pub fn load<T: Float>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Trainer<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| NppError::io(path, e))?;
    decode(&bytes, expected)
}

/// Model weights only, for evaluation and sampling.
pub fn load_model<T: Float>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| NppError::io(path, e))?;
    let (manifest, payload) = decode_container(&bytes)?;
    let config = manifest.run_config.model.clone();
    let params = Parameters::from_tensors(&config, load_params(&manifest, payload, "")?)?;
    Model::from_parameters(config, params)
}

/// Resumes `config` from a checkpoint, refusing incompatible settings.
pub fn resume<T: Float>(path: impl AsRef<Path>, config: &RunConfig) -> Result<Trainer<T>> {
    let mut trainer = load::<T>(path, Some(&config.model))?;
    trainer.config().check_resumable(config)?;
    trainer.config = RunConfig {
        dtype: T::DTYPE,
        ..config.clone()
    };
    Ok(trainer)
}
