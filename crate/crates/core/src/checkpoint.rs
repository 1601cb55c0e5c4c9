//! Checkpoint directory format: a JSON manifest (config hash, resolved
//! config, step, metric summary, parameter names) plus one flat binary
//! tensor file per parameter, little-endian f64 with a rows/cols header.

use crate::config::RunConfig;
use crate::model::GateFusionModel;
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("checkpoint config invalid: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricSummary {
    pub ap_av: f64,
    pub ap_a: f64,
    pub ap_v: f64,
    pub cls: f64,
    pub mal: f64,
    pub opp: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub step: u64,
    pub metrics: Option<MetricSummary>,
    pub config: RunConfig,
    pub params: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn tensor_file_name(index: usize, name: &str) -> String {
    format!("{index:04}_{}.bin", name.replace(['/', '\\'], "_"))
}

fn write_tensor(path: &Path, m: &Matrix) -> Result<(), CheckpointError> {
    let mut buf = Vec::with_capacity(8 + m.len() * 8);
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .map_err(|e| io_err(path, e))?
        .write_all(&buf)
        .map_err(|e| io_err(path, e))
}

fn read_tensor(path: &Path) -> Result<Matrix, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let corrupt = |reason: &str| CheckpointError::Corrupt {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 {
        return Err(corrupt("truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + rows * cols * 8 {
        return Err(corrupt("size does not match header"));
    }
    let mut m = Matrix::zeros((rows, cols));
    let mut off = 8;
    for v in m.iter_mut() {
        *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
    }
    Ok(m)
}

pub fn save_checkpoint(
    dir: &Path,
    model: &GateFusionModel,
    config: &RunConfig,
    step: u64,
    metrics: Option<&MetricSummary>,
) -> Result<(), CheckpointError> {
    let params_dir = dir.join("params");
    std::fs::create_dir_all(&params_dir).map_err(|e| io_err(&params_dir, e))?;
    let manifest = Manifest {
        config_hash: config.hash(),
        step,
        metrics: metrics.cloned(),
        config: config.clone(),
        params: model
            .store
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .collect(),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
    for (i, e) in model.store.entries().iter().enumerate() {
        write_tensor(&params_dir.join(tensor_file_name(i, &e.name)), &e.value)?;
    }
    Ok(())
}

/// Rebuild the model from a checkpoint directory. The manifest's embedded
/// config reconstructs the architecture; parameter files then overwrite the
/// fresh initialization.
pub fn load_checkpoint(dir: &Path) -> Result<(GateFusionModel, Manifest), CheckpointError> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Corrupt {
        path: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    manifest
        .config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut model = GateFusionModel::new(&manifest.config)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    if manifest.params.len() != model.store.len() {
        return Err(CheckpointError::Corrupt {
            path: dir.display().to_string(),
            reason: format!(
                "parameter count {} does not match architecture ({})",
                manifest.params.len(),
                model.store.len()
            ),
        });
    }
    for (i, (entry, name)) in model
        .store
        .entries_mut()
        .iter_mut()
        .zip(&manifest.params)
        .enumerate()
    {
        if &entry.name != name {
            return Err(CheckpointError::Corrupt {
                path: dir.display().to_string(),
                reason: format!("parameter {i} is {} but manifest says {name}", entry.name),
            });
        }
        let value = read_tensor(&dir.join("params").join(tensor_file_name(i, name)))?;
        if value.dim() != entry.value.dim() {
            return Err(CheckpointError::Corrupt {
                path: dir.display().to_string(),
                reason: format!("parameter {name} has wrong shape"),
            });
        }
        entry.value = value;
    }
    Ok((model, manifest))
}
