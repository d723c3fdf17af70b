//! Single-file checkpoints.
//!
//! Layout: one line of JSON ([`CheckpointHeader`]) terminated by `\n`,
//! followed by every tensor of [`UNetParams::tensors`] as little-endian
//! `f32`, in that order and with no padding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{init_unet, UNetConfig, UNetParams};
use crate::error::{Error, Result};
use crate::io::write_bytes;

pub const CHECKPOINT_FORMAT: &str = "sparse-ct-lab/unet";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub config: UNetConfig,
    pub epoch: usize,
    pub val_loss: f64,
    /// Projection view count the model was trained for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(
    params: &UNetParams<f32>,
    config: &UNetConfig,
    epoch: usize,
    val_loss: f64,
    views: Option<usize>,
) -> Result<Vec<u8>> {
    let tensors = params.tensors();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: *config,
        epoch,
        val_loss,
        views,
        tensors: tensors
            .iter()
            .map(|(name, _, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, _, t) in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, UNetParams<f32>)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::InvalidArgument("checkpoint header is not terminated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "not a checkpoint: format {:?}",
            header.format
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut params = init_unet::<f32>(&header.config, 0)?;
    let mut blob = &bytes[split + 1..];
    {
        let tensors = params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(Error::ShapeMismatch(
                "checkpoint tensor list does not match its configuration".into(),
            ));
        }
        for ((name, _, t), entry) in tensors.into_iter().zip(&header.tensors) {
            if name != entry.name || t.len() != entry.len {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {} ({}) does not match {name} ({})",
                    entry.name,
                    entry.len,
                    t.len()
                )));
            }
            let need = 4 * t.len();
            if blob.len() < need {
                return Err(Error::InvalidArgument(
                    "checkpoint blob is truncated".into(),
                ));
            }
            for (v, chunk) in t.iter_mut().zip(blob[..need].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            blob = &blob[need..];
        }
    }
    if !blob.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} trailing bytes after checkpoint blob",
            blob.len()
        )));
    }
    let all_finite = params
        .tensors()
        .iter()
        .all(|(_, _, t)| t.iter().all(|v| v.is_finite()));
    if !all_finite {
        return Err(Error::NonFinite(
            "checkpoint holds non-finite parameters".into(),
        ));
    }
    Ok((header, params))
}

pub fn save_checkpoint(
    path: &Path,
    params: &UNetParams<f32>,
    config: &UNetConfig,
    epoch: usize,
    val_loss: f64,
    views: Option<usize>,
) -> Result<()> {
    write_bytes(
        path,
        &encode_checkpoint(params, config, epoch, val_loss, views)?,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, UNetParams<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
