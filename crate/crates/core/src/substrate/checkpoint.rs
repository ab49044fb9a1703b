//! Two-file checkpoint: a versioned JSON manifest plus a blob of
//! little-endian `f64` values in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_digest: String,
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
}

/// Paths of the manifest and blob for a checkpoint stem such as `dir/epoch_003`.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn write_checkpoint(
    stem: &Path,
    config_digest: &str,
    tensors: &[(String, Tensor)],
) -> Result<Vec<PathBuf>> {
    let (manifest_path, blob_path) = checkpoint_paths(stem);
    if let Some(parent) = manifest_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (id, t) in tensors {
        entries.push(ManifestEntry {
            id: id.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.to_string(),
        config_digest: config_digest.to_string(),
        blob: blob_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        entries,
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    fs::write(&blob_path, blob)?;
    Ok(vec![manifest_path, blob_path])
}

pub fn read_checkpoint(stem: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let (manifest_path, blob_path) = checkpoint_paths(stem);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported manifest version `{}`",
            manifest.version
        )));
    }
    let blob = fs::read(&blob_path)?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "entry `{}` runs past the blob end",
                e.id
            )));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.id.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, out))
}
