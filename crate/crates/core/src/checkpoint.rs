//! Checkpoints: a versioned JSON manifest (shapes, hyperparameters, seed,
//! phase) next to a little-endian binary blob of parameter tensors in
//! declaration order. `<stem>.json` + `<stem>.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, MilModel, SliceModel};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    /// "mil" or "slice".
    pub kind: String,
    pub dims: Dims,
    pub dropout: f64,
    pub seed: u64,
    pub phase: u32,
    pub tensors: Vec<TensorInfo>,
}

fn write_blob(path: &Path, tensors: &[(&'static str, &[f64])]) -> Result<Vec<TensorInfo>> {
    let mut blob = Vec::new();
    let mut infos = Vec::new();
    for (name, data) in tensors {
        infos.push(TensorInfo {
            name: name.to_string(),
            len: data.len(),
        });
        for &x in *data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, blob)?;
    Ok(infos)
}

fn read_blob(path: &Path, manifest: &CheckpointManifest, tensors: Vec<(&'static str, &mut [f64])>) -> Result<()> {
    let blob = fs::read(path)?;
    let expected: usize = manifest.tensors.iter().map(|t| t.len * 8).sum();
    if blob.len() != expected {
        return Err(Error::InvalidData(format!(
            "{}: blob is {} bytes, manifest says {expected}",
            path.display(),
            blob.len()
        )));
    }
    if manifest.tensors.len() != tensors.len() {
        return Err(Error::InvalidData(format!(
            "{}: {} tensors in manifest, model has {}",
            path.display(),
            manifest.tensors.len(),
            tensors.len()
        )));
    }
    let mut offset = 0;
    for (info, (name, data)) in manifest.tensors.iter().zip(tensors) {
        if info.name != name || info.len != data.len() {
            return Err(Error::InvalidData(format!(
                "tensor mismatch: manifest has {} (len {}), model expects {} (len {})",
                info.name,
                info.len,
                name,
                data.len()
            )));
        }
        for x in data.iter_mut() {
            *x = f64::from_le_bytes(blob[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    }
    Ok(())
}

fn paths(stem: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_mil(stem: &Path, model: &MilModel, seed: u64) -> Result<()> {
    let (json_path, bin_path) = paths(stem);
    let tensors = write_blob(&bin_path, &model.tensors())?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind: "mil".into(),
        dims: model.dims,
        dropout: model.dropout,
        seed,
        phase: 2,
        tensors,
    };
    fs::write(json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn save_slice(stem: &Path, model: &SliceModel, seed: u64) -> Result<()> {
    let (json_path, bin_path) = paths(stem);
    let tensors = write_blob(&bin_path, &model.tensors())?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind: "slice".into(),
        dims: model.dims,
        dropout: model.dropout,
        seed,
        phase: 1,
        tensors,
    };
    fs::write(json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_manifest(stem: &Path) -> Result<CheckpointManifest> {
    let (json_path, _) = paths(stem);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidData(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn load_mil(stem: &Path) -> Result<MilModel> {
    let manifest = load_manifest(stem)?;
    if manifest.kind != "mil" {
        return Err(Error::InvalidData(format!(
            "expected a mil checkpoint, found `{}`",
            manifest.kind
        )));
    }
    let mut model = MilModel::zeros(manifest.dims, manifest.dropout);
    let (_, bin_path) = paths(stem);
    read_blob(&bin_path, &manifest, model.tensors_mut())?;
    Ok(model)
}

pub fn load_slice(stem: &Path) -> Result<SliceModel> {
    let manifest = load_manifest(stem)?;
    if manifest.kind != "slice" {
        return Err(Error::InvalidData(format!(
            "expected a slice checkpoint, found `{}`",
            manifest.kind
        )));
    }
    let mut model = SliceModel::zeros(manifest.dims, manifest.dropout);
    let (_, bin_path) = paths(stem);
    read_blob(&bin_path, &manifest, model.tensors_mut())?;
    Ok(model)
}
