//! Versioned JSON container of named tensors.
//!
//! ```json
//! { "format": "dastr-tensors", "version": 1, "kind": "committor-net",
//!   "meta": { ... }, "tensors": [ { "name": "...", "shape": [..], "data": [..] } ] }
//! ```
//!
//! `meta` holds the architecture needed to rebuild the model. Floats are
//! written with shortest round-trip formatting, so load(save(x)) is exact.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const FORMAT: &str = "dastr-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("checkpoint kind {found:?}, expected {expected:?}")]
    Kind { expected: String, found: String },
    #[error("tensor {name:?}: {reason}")]
    Tensor { name: String, reason: String },
}

/// Anything with a fixed list of named parameter tensors.
pub trait Parameterized {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<M: Parameterized + ?Sized>(kind: &str, meta: serde_json::Value, model: &M) -> Self {
        let tensors = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    /// Copies tensors into `model`, checking names and shapes.
    pub fn load_into<M: Parameterized + ?Sized>(&self, kind: &str, model: &mut M) -> Result<(), CheckpointError> {
        self.check_header(kind)?;
        let names = model.param_names();
        if names.len() != self.tensors.len() {
            return Err(CheckpointError::Tensor {
                name: String::new(),
                reason: format!("expected {} tensors, found {}", names.len(), self.tensors.len()),
            });
        }
        for ((name, dst), src) in names.into_iter().zip(model.params_mut()).zip(&self.tensors) {
            if src.name != name || src.shape != dst.shape() {
                return Err(CheckpointError::Tensor {
                    name: src.name.clone(),
                    reason: format!("expected {name:?} with shape {:?}, found shape {:?}", dst.shape(), src.shape),
                });
            }
            let t = Tensor::new(src.shape.clone(), src.data.clone()).map_err(|e| CheckpointError::Tensor {
                name: src.name.clone(),
                reason: e.to_string(),
            })?;
            *dst = t;
        }
        Ok(())
    }

    pub fn check_header(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(CheckpointError::Format {
                format: self.format.clone(),
                version: self.version,
            });
        }
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let s = serde_json::to_string(self)?;
        write_atomic(path, s.as_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let s = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// SHA-256 over parameter names, shapes and little-endian values, as hex.
pub fn param_hash<M: Parameterized + ?Sized>(model: &M) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in model.param_names().iter().zip(model.params()) {
        h.update(name.as_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
