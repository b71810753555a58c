//! Weight store: a directory with `manifest.json` plus one raw little-endian
//! binary per tensor.
//!
//! ```json
//! { "LeNet/conv1/weights": { "file": "LeNet_conv1_weights.bin", "shape": [5, 5, 1, 6], "dtype": "f32le" } }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "f64le")]
    F64Le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

/// Named parameter tensors, keyed by `scope/layer/param`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor) {
        self.tensors.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Fetch `key` and check its shape.
    pub fn require(&self, key: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .get(key)
            .ok_or_else(|| Error::MissingWeights(key.to_string()))?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "weight store",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        t.check_finite(key)?;
        Ok(t.clone())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingWeights(format!("manifest {}", manifest_path.display())),
            _ => Error::io(&manifest_path, e),
        })?;
        let manifest: BTreeMap<String, ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        let mut store = WeightStore::new();
        for (key, entry) in manifest {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let count: usize = entry.shape.iter().product();
            let width = match entry.dtype {
                Dtype::F32Le => 4,
                Dtype::F64Le => 8,
            };
            if bytes.len() != count * width {
                return Err(Error::ShapeMismatch {
                    op: "weight file size",
                    left: vec![bytes.len()],
                    right: vec![count * width],
                });
            }
            let data: Vec<f64> = match entry.dtype {
                Dtype::F32Le => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64Le => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            store.insert(key, Tensor::new(entry.shape, data)?);
        }
        Ok(store)
    }

    /// Write every tensor plus the manifest. `F32Le` narrows each value to `f32`.
    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = BTreeMap::new();
        for (key, t) in &self.tensors {
            let file = format!("{}.bin", key.replace('/', "_"));
            let mut bytes = Vec::with_capacity(t.len() * 8);
            for &v in t.data() {
                match dtype {
                    Dtype::F32Le => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64Le => bytes.extend_from_slice(&v.to_le_bytes()),
                }
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            manifest.insert(
                key.clone(),
                ManifestEntry {
                    file,
                    shape: t.shape().to_vec(),
                    dtype,
                },
            );
        }
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Every value rounded to the nearest `f32`, as a save/load with `F32Le` would.
    pub fn narrowed_to_f32(&self) -> WeightStore {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.map(|v| v as f32 as f64)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = WeightStore::new();
        store.insert(
            "M/fc/weights",
            Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -1.0, 2.5, 1e-3]).unwrap(),
        );
        store.insert("M/fc/biases", Tensor::from_vec(vec![0.5, -0.25, 0.0]).unwrap());
        store.save(dir.path(), Dtype::F32Le).unwrap();
        let loaded = WeightStore::load(dir.path()).unwrap();
        assert_eq!(loaded, store.narrowed_to_f32());
        store.save(dir.path(), Dtype::F64Le).unwrap();
        assert_eq!(WeightStore::load(dir.path()).unwrap(), store);
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = WeightStore::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing weights"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = WeightStore::new();
        store.insert("a", Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        store.save(dir.path(), Dtype::F32Le).unwrap();
        fs::write(dir.path().join("a.bin"), [0u8; 5]).unwrap();
        assert!(WeightStore::load(dir.path()).is_err());
    }

    #[test]
    fn require_checks_shape() {
        let mut store = WeightStore::new();
        store.insert("a", Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        assert!(store.require("a", &[2]).is_ok());
        assert!(matches!(store.require("a", &[1, 2]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(store.require("b", &[2]), Err(Error::MissingWeights(_))));
    }
}
