//! Checkpoint files: a JSON manifest next to a raw little-endian blob.
//!
//! The blob starts with the 4-byte magic `DGE1`; each manifest entry gives
//! the byte offset of its parameter measured from the start of the blob
//! file, magic included.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::element::{DType, Element};
use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{DgeError, Result};

pub const MAGIC: &[u8; 4] = b"DGE1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub architecture: serde_json::Value,
    pub params: BTreeMap<String, ParamEntry>,
}

/// Paths of the two files making up a checkpoint named `stem`.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` and `<stem>.bin`; returns the manifest path.
pub fn save<T: Element>(stem: &Path, params: &ParamStore<T>, architecture: serde_json::Value) -> Result<PathBuf> {
    let (manifest_path, blob_path) = checkpoint_paths(stem);
    let mut blob = Vec::with_capacity(MAGIC.len() + params.num_elements() * T::DTYPE.size_of());
    blob.extend_from_slice(MAGIC);
    let mut entries = BTreeMap::new();
    for id in params.ids() {
        let value = params.value(id);
        entries.insert(
            params.name(id).to_string(),
            ParamEntry {
                shape: value.shape().to_vec(),
                dtype: T::DTYPE,
                offset: blob.len(),
            },
        );
        for &v in value.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        blob: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        architecture,
        params: entries,
    };
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DgeError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| DgeError::io(&manifest_path, e))?;
    fs::write(&blob_path, &blob).map_err(|e| DgeError::io(&blob_path, e))?;
    Ok(manifest_path)
}

pub fn read_manifest(manifest_path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| DgeError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format.as_bytes() != MAGIC {
        return Err(DgeError::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    Ok(manifest)
}

/// Reads every parameter, converting to `T` when the stored dtype differs.
pub fn read_tensors<T: Element>(manifest_path: &Path, manifest: &Manifest) -> Result<BTreeMap<String, Tensor<T>>> {
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| DgeError::io(&blob_path, e))?;
    if blob.len() < MAGIC.len() || &blob[..MAGIC.len()] != MAGIC {
        return Err(DgeError::Checkpoint(format!("{} lacks the DGE1 magic", blob_path.display())));
    }
    let mut out = BTreeMap::new();
    for (name, entry) in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let width = entry.dtype.size_of();
        let end = entry.offset + n * width;
        if entry.offset < MAGIC.len() || end > blob.len() {
            return Err(DgeError::Checkpoint(format!("`{name}` lies outside the blob")));
        }
        let bytes = &blob[entry.offset..end];
        let data: Vec<T> = match entry.dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        };
        out.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(out)
}

/// Overwrites every parameter of `params` from `tensors`; the name sets and
/// shapes must agree exactly.
pub fn restore<T: Element>(params: &mut ParamStore<T>, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<()> {
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        let t = tensors
            .remove(&name)
            .ok_or_else(|| DgeError::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.shape() != params.value(id).shape() {
            return Err(DgeError::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                params.value(id).shape()
            )));
        }
        *params.value_mut(id) = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(DgeError::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}
