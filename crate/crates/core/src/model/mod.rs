//! Portable model format: a JSON manifest describing the layer graph plus a
//! raw little-endian `f32` blob holding the weights.
//!
//! The manifest schema is documented in the repository README. Weight
//! element order is row-major with these axis conventions:
//!
//! * Dense kernel: `(input_features, units)`
//! * Conv2D kernel: `(kernel_h, kernel_w, in_channels, out_channels)`
//! * DepthwiseConv2D kernel: `(kernel_h, kernel_w, channels, 1)`
//! * biases, batch-norm scale and offset: `(channels)`

mod builder;
mod json;
mod manifest;
mod weights;

pub use builder::ModelBuilder;
pub use json::{parse_manifest, serialize_manifest};
pub use manifest::{
    Activation, LayerConfig, LayerKind, LayerSpec, ModelManifest, Padding, WeightRef, WeightRole,
    FORMAT_VERSION,
};
pub use weights::{encode_blob, load_weights, WeightStore, WeightTensor};

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("malformed manifest: {0}")]
    Syntax(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("layer `{layer}` has unknown kind `{kind}`")]
    UnknownLayerKind { layer: String, kind: String },
    #[error("{context} references undeclared layer `{name}`")]
    DanglingReference { name: String, context: String },
    #[error("weight `{name}` spans bytes up to {end} but the blob holds only {len}")]
    BlobTooShort {
        name: String,
        end: usize,
        len: usize,
    },
    #[error("weight `{name}` holds a non-finite value at element {index}")]
    NonFiniteWeight { name: String, index: usize },
    #[error("layer `{layer}` is missing its `{role}` weight")]
    MissingWeight { layer: String, role: String },
}

/// A manifest paired with its materialized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub manifest: ModelManifest,
    pub weights: WeightStore,
}

impl Model {
    pub fn from_bytes(manifest: &[u8], blob: &[u8]) -> Result<Self, FormatError> {
        let manifest = parse_manifest(manifest)?;
        let weights = load_weights(&manifest, blob)?;
        Ok(Model { manifest, weights })
    }

    /// Loads `manifest_path` and its companion blob. When `weights_path` is
    /// `None` the blob is expected next to the manifest with a `.bin`
    /// extension.
    pub fn load(manifest_path: &Path, weights_path: Option<&Path>) -> Result<Self, crate::Error> {
        let weights_path = weights_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| default_weights_path(manifest_path));
        let manifest = read_file(manifest_path)?;
        let blob = read_file(&weights_path)?;
        Ok(Model::from_bytes(&manifest, &blob)?)
    }

    /// Writes `<base>.json` and `<base>.bin`.
    pub fn save(&self, base: &Path) -> Result<(), crate::Error> {
        let json_path = base.with_extension("json");
        let bin_path = base.with_extension("bin");
        let text = serialize_manifest(&self.manifest);
        let blob = encode_blob(&self.manifest, &self.weights)?;
        std::fs::write(&json_path, text).map_err(|source| crate::Error::Io {
            path: json_path.clone(),
            source,
        })?;
        std::fs::write(&bin_path, blob).map_err(|source| crate::Error::Io {
            path: bin_path.clone(),
            source,
        })?;
        Ok(())
    }
}

pub fn default_weights_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn read_file(path: &Path) -> Result<Vec<u8>, crate::Error> {
    std::fs::read(path).map_err(|source| crate::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
