//! Checkpoints: `checkpoint.json` (manifest) plus `checkpoint.bin`, the
//! parameters as little-endian f64 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::split::SplitSpec;
use crate::error::{Error, Result};
use crate::model::params::{Model, ModelDims, ModelParams};
use crate::model::ModelConfig;
use crate::numerics::Matrix;

pub const CHECKPOINT_FORMAT: &str = "adapert-checkpoint/1";
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub dims: ModelDims,
    pub seed: u64,
    pub tensors: Vec<TensorInfo>,
    pub vocab: Vec<String>,
    pub train_perturbations: Vec<String>,
    pub split: Option<SplitSpec>,
    pub huber_delta: Option<f64>,
}

impl CheckpointManifest {
    pub fn for_model(
        model: &Model,
        seed: u64,
        vocab: Vec<String>,
        split: Option<SplitSpec>,
        huber_delta: Option<f64>,
    ) -> Self {
        let tensors = model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect();
        CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            model: model.config.clone(),
            dims: model.dims,
            seed,
            tensors,
            vocab,
            train_perturbations: model.train_perturbations.clone(),
            split,
            huber_delta,
        }
    }
}

pub fn save_checkpoint(dir: impl AsRef<Path>, manifest: &CheckpointManifest, params: &ModelParams) -> Result<()> {
    let dir = dir.as_ref();
    if manifest.tensors.len() != params.len() {
        return Err(Error::Usage(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    let mut blob = Vec::with_capacity(params.scalar_count() * 8);
    for (info, (name, t)) in manifest.tensors.iter().zip(params.names().iter().zip(params.tensors())) {
        if &info.name != name || (info.rows, info.cols) != t.shape() {
            return Err(Error::Usage(format!("manifest entry `{}` does not match `{name}`", info.name)));
        }
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(manifest)?;
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    std::fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, Model)> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint format `{}`",
            mpath.display(),
            manifest.format
        )));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if blob.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} bytes, manifest needs {expected}",
            bpath.display(),
            blob.len()
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut names = Vec::with_capacity(manifest.tensors.len());
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for info in &manifest.tensors {
        let data: Vec<f64> = values.by_ref().take(info.rows * info.cols).collect();
        names.push(info.name.clone());
        tensors.push(Matrix::from_vec(info.rows, info.cols, data)?);
    }
    let params = ModelParams::from_parts(names, tensors)?;
    let model = Model {
        config: manifest.model.clone(),
        dims: manifest.dims,
        params,
        train_perturbations: manifest.train_perturbations.clone(),
    };
    Ok((manifest, model))
}
