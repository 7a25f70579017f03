use std::collections::BTreeMap;

use super::manifest::{ModelManifest, WeightRole};
use super::FormatError;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Weight tensors keyed by their manifest name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, WeightTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: WeightTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &WeightTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Materializes every weight referenced by `manifest` from a little-endian
/// `f32` blob.
pub fn load_weights(manifest: &ModelManifest, blob: &[u8]) -> Result<WeightStore, FormatError> {
    for layer in &manifest.layers {
        for &role in layer.kind().required_roles(layer.config.use_bias()) {
            if layer.weight(role).is_none() {
                return Err(FormatError::MissingWeight {
                    layer: layer.name.clone(),
                    role: role.as_str().to_string(),
                });
            }
        }
    }

    let mut store = WeightStore::new();
    for (_, w) in manifest.weight_refs() {
        let end = w
            .length
            .checked_mul(4)
            .and_then(|n| n.checked_add(w.offset))
            .unwrap_or(usize::MAX);
        if end > blob.len() {
            return Err(FormatError::BlobTooShort {
                name: w.name.clone(),
                end,
                len: blob.len(),
            });
        }
        let data: Vec<f32> = blob[w.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFiniteWeight {
                name: w.name.clone(),
                index,
            });
        }
        store.insert(
            w.name.clone(),
            WeightTensor {
                shape: w.shape.clone(),
                data,
            },
        );
    }
    Ok(store)
}

/// Inverse of [`load_weights`]: lays the store out at the offsets the
/// manifest declares. Gaps are zero-filled.
pub fn encode_blob(manifest: &ModelManifest, store: &WeightStore) -> Result<Vec<u8>, FormatError> {
    let size = manifest
        .weight_refs()
        .map(|(_, w)| w.offset + 4 * w.length)
        .max()
        .unwrap_or(0);
    let mut blob = vec![0u8; size];
    for (layer, w) in manifest.weight_refs() {
        let tensor = store
            .get(&w.name)
            .ok_or_else(|| FormatError::MissingWeight {
                layer: layer.name.clone(),
                role: w.role().map_or("weight", WeightRole::as_str).to_string(),
            })?;
        for (i, v) in tensor.data.iter().take(w.length).enumerate() {
            let at = w.offset + 4 * i;
            blob[at..at + 4].copy_from_slice(&v.to_le_bytes());
        }
    }
    Ok(blob)
}
