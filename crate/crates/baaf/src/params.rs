//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a JSON manifest (`<base>.json`) plus a flat payload
//! (`<base>.bin`) of little-endian 32-bit floats, in manifest order.
//! The manifest lists parameter path, shape, trainable flag, and the byte
//! offset/element count into the payload; see `docs/formats.md`.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Map from dot-separated parameter path to tensor. Iteration order is
/// lexicographic by path, so optimizer sweeps and serialization are
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Elem> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: &str, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.params.contains_key(path) {
            return Err(Error::invalid(format!("duplicate parameter path `{path}`")));
        }
        self.params
            .insert(path.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.params
            .get(path)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter path `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(path)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter path `{path}`")))
    }

    pub fn set(&mut self, path: &str, tensor: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::invalid(format!("unknown parameter path `{path}`")))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::shape_mismatch(path, p.tensor.shape(), tensor.shape()));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    /// Lexicographic iteration over all parameters.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Byte offset into the payload file.
    offset: u64,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    params: Vec<ManifestEntry>,
}

const FORMAT_TAG: &str = "baaf-checkpoint-v1";

/// Write `<base>.json` and `<base>.bin`.
pub fn save_checkpoint<T: Elem>(store: &ParameterStore<T>, base: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut payload: Vec<u8> = Vec::new();
    for (path, param) in store.iter() {
        entries.push(ManifestEntry {
            path: path.clone(),
            shape: param.tensor.shape().to_vec(),
            trainable: param.trainable,
            offset: payload.len() as u64,
            len: param.tensor.numel(),
        });
        for &v in param.tensor.data() {
            let f = v.to_f64().unwrap() as f32;
            payload.extend_from_slice(&f.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        dtype: "f32le".to_string(),
        params: entries,
    };
    let json_path = base.with_extension("json");
    let bin_path = base.with_extension("bin");
    std::fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
    let mut f = std::fs::File::create(&bin_path)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Elem>(base: &Path) -> Result<ParameterStore<T>> {
    let json_path = base.with_extension("json");
    let bin_path = base.with_extension("bin");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::malformed(
            json_path.display().to_string(),
            format!("unknown checkpoint format `{}`", manifest.format),
        ));
    }
    let mut payload = Vec::new();
    std::fs::File::open(&bin_path)?.read_to_end(&mut payload)?;
    let mut store = ParameterStore::new();
    for e in &manifest.params {
        let need: usize = e.shape.iter().product();
        if need != e.len {
            return Err(Error::malformed(
                json_path.display().to_string(),
                format!("entry `{}` shape/len disagree", e.path),
            ));
        }
        let start = e.offset as usize;
        let end = start + 4 * e.len;
        if end > payload.len() {
            return Err(Error::malformed(
                bin_path.display().to_string(),
                format!("payload truncated reading `{}`", e.path),
            ));
        }
        let mut data = Vec::with_capacity(e.len);
        for i in 0..e.len {
            let b = &payload[start + 4 * i..start + 4 * i + 4];
            let f = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            data.push(T::from(f).unwrap());
        }
        store.insert(&e.path, Tensor::from_vec(e.shape.clone(), data)?, e.trainable)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_paths_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("a.w", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.insert("a.w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("b", Tensor::zeros(&[1]), true).unwrap();
        store.insert("a.z", Tensor::zeros(&[1]), true).unwrap();
        store.insert("a.b", Tensor::zeros(&[1]), false).unwrap();
        let order: Vec<&String> = store.iter().map(|(k, _)| k).collect();
        assert_eq!(order, ["a.b", "a.z", "b"]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let mut store = ParameterStore::<f32>::new();
        store
            .insert(
                "enc.w",
                Tensor::from_vec(vec![2, 2], vec![1.5, -0.25, 3.0, 0.0]).unwrap(),
                true,
            )
            .unwrap();
        store
            .insert("enc.bn.mean", Tensor::from_vec(vec![2], vec![0.1, 0.2]).unwrap(), false)
            .unwrap();
        save_checkpoint(&store, &base).unwrap();
        let loaded: ParameterStore<f32> = load_checkpoint(&base).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.get("enc.w").unwrap().data(), store.get("enc.w").unwrap().data());
        assert!(!loaded.iter().find(|(k, _)| *k == "enc.bn.mean").unwrap().1.trainable);
    }

    #[test]
    fn truncated_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[8]), true).unwrap();
        save_checkpoint(&store, &base).unwrap();
        let bin = base.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&base),
            Err(Error::Malformed { .. })
        ));
    }
}
