//! Checkpoint files: a JSON manifest plus a blob of little-endian f32
//! tensors stored in manifest order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::model::{ImplicitUNet, ModelConfig};
use crate::optim::OptimState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ImplicitUNet<T>,
    pub optimizer: Option<OptimState<T>>,
    pub step: u64,
    pub train_config: Option<TrainConfig>,
    pub intensity: Option<DatasetStats>,
}

impl<T: Scalar> Checkpoint<T> {
    /// A bare checkpoint holding only model weights.
    pub fn from_model(model: ImplicitUNet<T>) -> Self {
        Self { model, optimizer: None, step: 0, train_config: None, intensity: None }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    step: u64,
    optimizer_step: Option<u64>,
    train_config: Option<TrainConfig>,
    intensity: Option<DatasetStats>,
    blob: String,
    blob_bytes: u64,
    tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn named_state<'a, T: Scalar>(ckpt: &'a Checkpoint<T>) -> Vec<(String, &'a Tensor<T>)> {
    let mut out = ckpt.model.named_tensors();
    if let Some(opt) = &ckpt.optimizer {
        let names: Vec<String> = out.iter().map(|(n, _)| n.clone()).collect();
        out.extend(names.iter().zip(&opt.m).map(|(n, t)| (format!("optim.m.{n}"), t)));
        out.extend(names.iter().zip(&opt.v).map(|(n, t)| (format!("optim.v.{n}"), t)));
    }
    out
}

/// Writes `path` (manifest) and `path` with extension `bin` (blob).
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blob_file = blob_path(path);
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named_state(ckpt) {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: blob.len() as u64 });
        for &v in t.data() {
            blob.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: ckpt.model.config(),
        step: ckpt.step,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.t),
        train_config: ckpt.train_config.clone(),
        intensity: ckpt.intensity,
        blob: blob_file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        blob_bytes: blob.len() as u64,
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("corrupted manifest: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
        Some(v) => return Err(Error::format(path, format!("unknown checkpoint format version {v}"))),
        None => return Err(Error::format(path, "corrupted manifest: missing format_version")),
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::format(path, format!("corrupted manifest: {e}")))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let blob_file = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if (blob.len() as u64) < manifest.blob_bytes {
        return Err(Error::format(
            &blob_file,
            format!("truncated blob: manifest declares {} bytes, file has {}", manifest.blob_bytes, blob.len()),
        ));
    }

    let mut ckpt = Checkpoint {
        model: ImplicitUNet::<T>::zeros(&manifest.model).map_err(|e| Error::format(path, e.to_string()))?,
        optimizer: manifest.optimizer_step.map(|t| OptimState { m: Vec::new(), v: Vec::new(), t }),
        step: manifest.step,
        train_config: manifest.train_config.clone(),
        intensity: manifest.intensity,
    };
    if let Some(opt) = ckpt.optimizer.as_mut() {
        let shapes = ckpt.model.named_tensors();
        opt.m = shapes.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        opt.v = opt.m.clone();
    }
    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let names: Vec<String> = named_state(&ckpt).into_iter().map(|(n, _)| n).collect();
    let mut slots = ckpt.model.tensors_mut();
    if let Some(opt) = ckpt.optimizer.as_mut() {
        slots.extend(opt.m.iter_mut());
        slots.extend(opt.v.iter_mut());
    }
    for (name, slot) in names.iter().zip(slots) {
        let entry = entries
            .get(name.as_str())
            .ok_or_else(|| Error::format(path, format!("missing tensor entry '{name}'")))?;
        if entry.shape != slot.shape() {
            return Err(Error::format(
                path,
                format!("tensor '{name}': manifest shape {:?}, architecture expects {:?}", entry.shape, slot.shape()),
            ));
        }
        let start = entry.offset as usize;
        let end = start + slot.numel() * 4;
        if end > blob.len() {
            return Err(Error::format(
                &blob_file,
                format!("truncated blob: tensor '{name}' needs bytes {start}..{end}, file has {}", blob.len()),
            ));
        }
        for (dst, b) in slot.data_mut().iter_mut().zip(blob[start..end].chunks_exact(4)) {
            *dst = T::lit(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
    }
    Ok(ckpt)
}
