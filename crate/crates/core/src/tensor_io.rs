//! Named-tensor container with a content hash, used for checkpoints and embedding banks.
//!
//! Layout (JSON): `{"format", "version", "metadata", "tensors": [{"name", "shape", "data"}],
//! "sha256"}`. `data` is row-major. The hash covers every tensor name, shape and the
//! little-endian bytes of its values, in order; metadata is not hashed.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT: &str = "pocketalign-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("unsupported container {format} v{version}")]
    Unsupported { format: String, version: u32 },
    #[error("content hash mismatch")]
    HashMismatch,
    #[error("tensor {0} has inconsistent shape")]
    BadShape(String),
    #[error("missing or unexpected tensor {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, array: &Array2<f64>) -> Self {
        Self {
            name: name.into(),
            shape: [array.nrows(), array.ncols()],
            data: array.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>, TensorIoError> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|_| TensorIoError::BadShape(self.name.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub format: String,
    pub version: u32,
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
    pub sha256: String,
}

pub fn content_hash<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Array2<f64>)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.nrows() as u64).to_le_bytes());
        h.update((t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl TensorFile {
    pub fn new(metadata: serde_json::Value, tensors: Vec<(String, Array2<f64>)>) -> Self {
        let sha256 = content_hash(tensors.iter().map(|(n, t)| (n.as_str(), t)));
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            metadata,
            tensors: tensors.iter().map(|(n, t)| NamedTensor::new(n.clone(), t)).collect(),
            sha256,
        }
    }

    /// Tensors in file order, after checking the container header and hash.
    pub fn arrays(&self) -> Result<Vec<(String, Array2<f64>)>, TensorIoError> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(TensorIoError::Unsupported {
                format: self.format.clone(),
                version: self.version,
            });
        }
        let arrays = self
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), t.to_array()?)))
            .collect::<Result<Vec<_>, TensorIoError>>()?;
        if content_hash(arrays.iter().map(|(n, t)| (n.as_str(), t))) != self.sha256 {
            return Err(TensorIoError::HashMismatch);
        }
        Ok(arrays)
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorIoError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, TensorIoError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Embedding bank: one 1×d row per id, stored in the tensor container.
pub fn write_embedding_bank(path: &Path, entries: &[(String, Vec<f64>)]) -> Result<(), TensorIoError> {
    let tensors = entries
        .iter()
        .map(|(id, v)| (id.clone(), Array2::from_shape_vec((1, v.len()), v.clone()).expect("row vector")))
        .collect();
    TensorFile::new(serde_json::json!({"kind": "embedding_bank"}), tensors).write(path)
}

pub fn read_embedding_bank(path: &Path) -> Result<Vec<(String, Vec<f64>)>, TensorIoError> {
    Ok(TensorFile::read(path)?
        .arrays()?
        .into_iter()
        .map(|(id, a)| (id, a.iter().copied().collect()))
        .collect())
}
