//! Checkpoint files: a raw little-endian `f32` blob in [`ParamSet`] order plus a JSON manifest
//! (`<blob>.json`) listing every entry's name, shape and byte offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "fourcnet-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub total_bytes: usize,
    pub params: Vec<ManifestEntry>,
    /// Free-form model description needed to rebuild the architecture.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn manifest_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(
    ps: &ParamSet<f32>,
    blob: &Path,
    config_hash: &str,
    seed: u64,
    meta: serde_json::Value,
) -> Result<Manifest> {
    let mut bytes = Vec::with_capacity(ps.iter().map(|e| e.tensor.len() * 4).sum());
    let mut params = Vec::with_capacity(ps.len());
    for e in ps.iter() {
        params.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            offset: bytes.len(),
            trainable: e.trainable,
        });
        for v in e.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        total_bytes: bytes.len(),
        params,
        meta,
    };
    if let Some(dir) = blob.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(blob, &bytes)?;
    fs::write(manifest_path(blob), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(blob: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path(blob)).map_err(|e| {
        NumericsError::Checkpoint(format!("cannot read manifest for {}: {e}", blob.display()))
    })?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(NumericsError::Checkpoint(format!(
            "unknown checkpoint format {}",
            m.format
        )));
    }
    Ok(m)
}

pub fn load_checkpoint(blob: &Path) -> Result<(ParamSet<f32>, Manifest)> {
    let manifest = read_manifest(blob)?;
    let bytes = fs::read(blob).map_err(|e| {
        NumericsError::Checkpoint(format!("cannot read checkpoint {}: {e}", blob.display()))
    })?;
    if bytes.len() != manifest.total_bytes {
        return Err(NumericsError::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            bytes.len(),
            manifest.total_bytes
        )));
    }
    let mut ps = ParamSet::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > bytes.len() {
            return Err(NumericsError::Checkpoint(format!(
                "entry {} runs past end of blob",
                e.name
            )));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        ps.add(&e.name, Tensor::new(&e.shape, data)?, e.trainable)?;
    }
    Ok((ps, manifest))
}

/// Loads values into an existing parameter set of identical structure.
pub fn load_into(ps: &mut ParamSet<f32>, blob: &Path) -> Result<Manifest> {
    let (loaded, manifest) = load_checkpoint(blob)?;
    ps.check_aligned(&loaded)
        .map_err(|e| NumericsError::Checkpoint(format!("checkpoint does not match model: {e}")))?;
    for (dst, src) in ps.iter_mut().zip(loaded.iter()) {
        dst.tensor.data_mut().copy_from_slice(src.tensor.data());
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_layout_is_little_endian_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::new(&[2], vec![1.0, -2.5]).unwrap(), true)
            .unwrap();
        ps.add("b", Tensor::new(&[1, 1], vec![0.5]).unwrap(), false)
            .unwrap();
        let path = dir.path().join("m.bin");
        let m = save_checkpoint(&ps, &path, "abc", 7, serde_json::json!({"k": 1})).unwrap();
        assert_eq!(m.params[1].offset, 8);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[4..8], &(-2.5f32).to_le_bytes());
        let (back, m2) = load_checkpoint(&path).unwrap();
        assert_eq!(back, ps);
        assert_eq!(m2, m);
    }

    #[test]
    fn structure_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[2]), true).unwrap();
        let path = dir.path().join("m.bin");
        save_checkpoint(&ps, &path, "", 0, serde_json::Value::Null).unwrap();
        let mut other = ParamSet::new();
        other.add("a", Tensor::zeros(&[3]), true).unwrap();
        assert!(load_into(&mut other, &path).is_err());
        assert!(load_checkpoint(&dir.path().join("missing.bin")).is_err());
    }
}
