//! Versioned JSON checkpoints: model config, training provenance, and all
//! weights as shape-headed arrays. f64 values survive the round trip
//! exactly (shortest-round-trip formatting).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserModel, Params};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse checkpoint {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("weight {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing weight {0}")]
    MissingWeight(String),
}

/// Provenance recorded alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub train: TrainConfig,
    pub schedule_t_total: usize,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: DenoiserConfig,
    meta: TrainMeta,
    weights: Vec<WeightEntry>,
}

pub fn save(path: &Path, model: &DenoiserModel, meta: &TrainMeta) -> Result<(), CheckpointError> {
    let mut weights = Vec::new();
    model.params.each(|name, t| {
        weights.push(WeightEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    });
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        meta: meta.clone(),
        weights,
    };
    let json = serde_json::to_string(&file).expect("checkpoint always serializes");
    std::fs::write(path, json).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load(path: &Path) -> Result<(DenoiserModel, TrainMeta), CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| CheckpointError::Parse {
        path: path.display().to_string(),
        source: e,
    })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: file.version });
    }
    // start from a deterministic skeleton, then overwrite every weight
    let mut model = DenoiserModel::init(file.config.clone(), 0);
    let expected: Vec<(&'static str, Tensor)> = model.params.named();
    let mut params: Option<Params> = Some(model.params.clone());
    for (name, proto) in &expected {
        let entry = file
            .weights
            .iter()
            .find(|w| w.name == *name)
            .ok_or_else(|| CheckpointError::MissingWeight(name.to_string()))?;
        if entry.shape != proto.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                found: entry.shape.clone(),
                expected: proto.shape().to_vec(),
            });
        }
        let mut p = params.take().unwrap();
        p.set(name, Tensor::from_vec(&entry.shape, entry.data.clone()));
        params = Some(p);
    }
    model.params = params.unwrap();
    Ok((model, file.meta))
}
