//! On-disk snapshots of a model and, optionally, optimizer state.
//!
//! A checkpoint file is a small binary container: a 4-byte magic, a format
//! version, a length-prefixed JSON header (model config, array manifest,
//! free-form `extra` metadata such as the training step), and a payload of
//! little-endian `f64` values. Everything needed for a bit-exact resume is
//! stored at full precision — quantization experiments live *inside* the
//! forward pass, never in the serialization path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_specs, Model, ModelConfig, Params};
use crate::tensor::Tensor;
use crate::{LabError, Result};

const MAGIC: &[u8; 4] = b"OLAB";
const CHECKPOINT_VERSION: u32 = 1;

/// One named array in a checkpoint (a parameter or optimizer moment).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A deserialized checkpoint: config, arrays, and free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub arrays: Vec<CheckpointArray>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    /// Snapshot a model's parameters (optimizer state can be appended).
    pub fn from_model(model: &Model, extra: serde_json::Value) -> Checkpoint {
        let arrays = model
            .params()
            .iter()
            .map(|(name, t)| CheckpointArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        Checkpoint {
            config: model.cfg().clone(),
            arrays,
            extra,
        }
    }

    pub fn array(&self, name: &str) -> Option<&CheckpointArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Rebuild the parameter set, requiring every tensor the config expects.
    pub fn params(&self) -> Result<Params> {
        let mut entries = Vec::new();
        for (name, shape, _) in param_specs(&self.config) {
            let arr = self.array(&name).ok_or_else(|| {
                LabError::Checkpoint(format!("missing parameter array {name}"))
            })?;
            if arr.shape != shape {
                return Err(LabError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config wants {shape:?}",
                    arr.shape
                )));
            }
            entries.push((name, Tensor::new(&shape, arr.data.clone())));
        }
        Ok(Params::from_entries(entries))
    }

    /// Rebuild the full model.
    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.config.clone(), self.params()?)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into the payload.
    offset: u64,
    len: u64,
}

/// Serialize a checkpoint to `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut manifest = Vec::with_capacity(ckpt.arrays.len());
    let mut offset = 0u64;
    for a in &ckpt.arrays {
        let numel: usize = a.shape.iter().product();
        if numel != a.data.len() {
            return Err(LabError::Checkpoint(format!(
                "array {} has {} values but shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
        manifest.push(ManifestEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            offset,
            len: a.data.len() as u64,
        });
        offset += a.data.len() as u64;
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        manifest,
        extra: ckpt.extra.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| LabError::Checkpoint(format!("header: {e}")))?;

    let payload_bytes: usize = offset as usize * 8;
    let mut buf = Vec::with_capacity(4 + 4 + 8 + header_json.len() + payload_bytes);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for a in &ckpt.arrays {
        for &v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(buf: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    buf.get(at..at + n)
        .ok_or_else(|| LabError::Checkpoint(format!("file truncated reading {what}")))
}

/// Deserialize a checkpoint from `path`, validating the container layout.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let magic = take(&buf, 0, 4, "magic")?;
    if magic != MAGIC {
        return Err(LabError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(take(&buf, 4, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(LabError::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(take(&buf, 8, 8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len)
        .map_err(|_| LabError::Checkpoint("header length overflows".into()))?;
    let header_bytes = take(&buf, 16, header_len, "header")?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| LabError::Checkpoint(format!("invalid header: {e}")))?;
    if header.version != version {
        return Err(LabError::Checkpoint(
            "header and container disagree on the version".into(),
        ));
    }

    let payload = &buf[16 + header_len..];
    if payload.len() % 8 != 0 {
        return Err(LabError::Checkpoint("payload is not a whole number of f64s".into()));
    }
    let payload_elems = (payload.len() / 8) as u64;
    let mut arrays = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let numel: u64 = entry.shape.iter().map(|&d| d as u64).product();
        if numel != entry.len {
            return Err(LabError::Checkpoint(format!(
                "array {} declares {} values but shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        let end = entry.offset.checked_add(entry.len).ok_or_else(|| {
            LabError::Checkpoint(format!("array {} overflows the payload", entry.name))
        })?;
        if end > payload_elems {
            return Err(LabError::Checkpoint(format!(
                "array {} extends past the payload ({} > {} values)",
                entry.name, end, payload_elems
            )));
        }
        let start = entry.offset as usize * 8;
        let data: Vec<f64> = payload[start..start + entry.len as usize * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(CheckpointArray {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
    }
    Ok(Checkpoint {
        config: header.config,
        arrays,
        extra: header.extra,
    })
}

// ---------------------------------------------------------------------------
