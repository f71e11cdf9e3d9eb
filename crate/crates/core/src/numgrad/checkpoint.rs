//! Parameter checkpoints: `manifest.json` listing names, shapes and byte
//! offsets, plus `params.bin` holding little-endian `f64` values in manifest
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub dtype: String,
    pub byte_order: String,
    pub params: Vec<ManifestEntry>,
}

pub fn write_tensors<'a>(
    dir: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut params = Vec::new();
    for (name, t) in tensors {
        params.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            len: t.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        dtype: "f64".into(),
        byte_order: "little".into(),
        params,
    };
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_tensors(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.dtype != "f64" || manifest.byte_order != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported encoding {}/{}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for e in manifest.params {
        let start = e.offset as usize;
        let end = start + e.len * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("`{}` runs past the blob", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(out)
}

pub fn save_params(dir: &Path, store: &ParamStore) -> Result<()> {
    write_tensors(dir, store.iter().map(|(n, p)| (n, &p.value)))
}

/// Loads values into an existing store; names and shapes must match exactly.
pub fn load_params_into(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors = read_tensors(dir)?;
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for ((name, t), (sname, p)) in tensors.into_iter().zip(store.iter_mut()) {
        if name != sname || t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!("`{name}` does not match `{sname}`")));
        }
        p.value = t;
    }
    Ok(())
}
