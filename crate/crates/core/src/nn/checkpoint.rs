//! Two-file checkpoint format: a JSON manifest next to a blob of
//! little-endian f64 values. The blob lives at the manifest path with a
//! `.bin` extension.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MlpSpec, ParamSet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Free-form run metadata (seed, strategy, epoch, ...), stored verbatim.
pub type Metadata = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub spec: MlpSpec,
    pub metadata: Metadata,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    pub blob_bytes: usize,
    pub crc32: u32,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn encode(params: &ParamSet) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(params.len() * 8);
    let mut tensors = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        tensors.push(TensorEntry {
            name: format!("dense{l}.weight"),
            shape: layer.weights.shape().to_vec(),
            offset: bytes.len(),
        });
        layer
            .weights
            .iter()
            .for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        tensors.push(TensorEntry {
            name: format!("dense{l}.bias"),
            shape: vec![layer.bias.len()],
            offset: bytes.len(),
        });
        layer
            .bias
            .iter()
            .for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    }
    (bytes, tensors)
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    spec: &MlpSpec,
    metadata: &Metadata,
) -> Result<()> {
    if ParamSet::zeros(spec).slots() != params.slots() {
        return Err(Error::Dimension("parameters do not match the spec".into()));
    }
    let (bytes, tensors) = encode(params);
    let blob = blob_path(path);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        metadata: metadata.clone(),
        tensors,
        blob: blob
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: bytes.len(),
        crc32: crc32fast::hash(&bytes),
    };
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, MlpSpec, Metadata)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("unreadable manifest: {e}"),
        })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let found = crc32fast::hash(&bytes);
    if found != manifest.crc32 || bytes.len() != manifest.blob_bytes {
        return Err(Error::Checksum {
            path: blob,
            expected: manifest.crc32,
            found,
        });
    }
    let mut params = ParamSet::zeros(&manifest.spec);
    let expected = encode(&params).1;
    if expected != manifest.tensors || bytes.len() != params.len() * 8 {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: "tensor layout does not match the spec".into(),
        });
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for layer in &mut params.layers {
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *v = values.next().unwrap();
        }
    }
    Ok((params, manifest.spec, manifest.metadata))
}
