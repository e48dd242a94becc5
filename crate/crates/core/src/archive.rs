//! Single-file tensor archives (safetensors layout, `f64` little-endian)
//! with a string metadata map.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use thiserror::Error;

use crate::backbone::Matrix;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("archive format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let raw: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let mut bytes = Vec::with_capacity(m.len() * 8);
                for v in m.iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                (name.clone(), bytes, vec![m.nrows(), m.ncols()])
            })
            .collect();
        let views = raw
            .iter()
            .map(|(name, bytes, shape)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| ArchiveError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| ArchiveError::Format(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ArchiveError::Format(e.to_string()))?;
        let metadata = meta
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let st = SafeTensors::deserialize(bytes).map_err(|e| ArchiveError::Format(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name.clone(), view_to_matrix(&name, &view)?);
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn meta(&self, key: &str) -> Result<&str, ArchiveError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ArchiveError::Format(format!("metadata key `{key}` missing")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix, ArchiveError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ArchiveError::Format(format!("tensor `{name}` missing")))
    }
}

/// Converts a 1-D or 2-D tensor of `f32`/`f64` into a matrix; 1-D tensors
/// become a single row.
pub(crate) fn view_to_matrix(name: &str, view: &TensorView<'_>) -> Result<Matrix, ArchiveError> {
    let shape = view.shape();
    let (rows, cols) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => {
            return Err(ArchiveError::Format(format!(
                "tensor `{name}` has unsupported rank {}",
                other.len()
            )))
        }
    };
    let data = view.data();
    let values: Vec<f64> = match view.dtype() {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        other => {
            return Err(ArchiveError::Format(format!(
                "tensor `{name}` has unsupported dtype {other:?}"
            )))
        }
    };
    Matrix::from_shape_vec((rows, cols), values).map_err(|e| ArchiveError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let mut a = Archive::default();
        a.metadata.insert("kind".into(), "x".into());
        a.tensors.insert("w".into(), array![[1.0, -2.5], [3.0, f64::MIN_POSITIVE]]);
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(b.meta("kind").unwrap(), "x");
        assert_eq!(b.tensor("w").unwrap(), a.tensor("w").unwrap());
        assert!(b.tensor("missing").is_err());
    }
}
