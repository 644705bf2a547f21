//! Training checkpoints.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! header.json          format version, config hash, seed, step, tensor names
//! params/0000.cef ...  one double-precision CEF1 file per tensor, in name order
//! exp_avg/...          first moments
//! exp_avg_sq/...       second moments
//! slow/...             Lookahead slow weights, when present
//! losses.cef           N×1 loss history
//! ```
//!
//! Tensors are stored at full double precision, so resuming is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::cef1::{read_matrix, write_with, Payload};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Hash of the settings that must match for a resume to be meaningful.
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    /// Tensor names; file `k` of each store holds the `k`-th name.
    pub names: Vec<String>,
    pub lookahead: bool,
}

/// Hex SHA-256 of a serializable value's JSON form.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

fn store_dir(root: &Path, store: &str) -> PathBuf {
    root.join(store)
}

fn tensor_file(root: &Path, store: &str, k: usize) -> PathBuf {
    store_dir(root, store).join(format!("{k:04}.cef"))
}

fn write_store(root: &Path, store: &str, names: &[String], p: &ParamStore<f64>) -> Result<()> {
    let dir = store_dir(root, store);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (k, name) in names.iter().enumerate() {
        write_with(&tensor_file(root, store, k), p.get(name)?, Payload::F64)?;
    }
    Ok(())
}

/// Reads a store back, restoring rank-1 shapes from `like`.
fn read_store(root: &Path, store: &str, names: &[String], like: Option<&ParamStore<f64>>) -> Result<ParamStore<f64>> {
    let mut out = ParamStore::new();
    for (k, name) in names.iter().enumerate() {
        let mut t = read_matrix::<f64>(&tensor_file(root, store, k))?;
        if let Some(like) = like {
            let shape = like.get(name)?.shape();
            if t.len() != shape.iter().product::<usize>() {
                return Err(Error::Integrity(format!(
                    "{store}/{name}: {:?} does not match parameter shape {shape:?}",
                    t.shape()
                )));
            }
            t = t.reshape(shape)?;
        }
        out.insert(name.clone(), t);
    }
    Ok(out)
}

/// Writes `state` under `dir`, replacing any previous checkpoint there. The
/// new checkpoint is assembled beside `dir` and swapped in when complete.
pub fn save(dir: &Path, config_hash: &str, seed: u64, state: &TrainState) -> Result<()> {
    let names: Vec<String> = state.params.names().map(str::to_string).collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        seed,
        step: state.optimizer.step,
        names: names.clone(),
        lookahead: state.optimizer.slow.is_some(),
    };
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("checkpoint path {} has no final component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let written = (|| -> Result<()> {
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        write_store(&staging, "params", &names, &state.params)?;
        write_store(&staging, "exp_avg", &names, &state.optimizer.exp_avg)?;
        write_store(&staging, "exp_avg_sq", &names, &state.optimizer.exp_avg_sq)?;
        if let Some(slow) = &state.optimizer.slow {
            write_store(&staging, "slow", &names, slow)?;
        }
        let losses = Tensor::matrix(state.losses.len(), 1, state.losses.clone())?;
        write_with(&staging.join("losses.cef"), &losses, Payload::F64)?;
        let json = serde_json::to_string_pretty(&header)? + "\n";
        let path = staging.join(HEADER_FILE);
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    })();
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok(header)
}

/// Loads a checkpoint. With `expected_hash`, refuses checkpoints written
/// under different settings. Parameter shapes are taken from `like` (a
/// freshly initialized store for the same model).
pub fn load(dir: &Path, expected_hash: Option<&str>, like: &ParamStore<f64>) -> Result<(CheckpointHeader, TrainState)> {
    let header = read_header(dir)?;
    if let Some(h) = expected_hash {
        if h != header.config_hash {
            return Err(Error::Integrity(format!(
                "checkpoint config hash {} does not match the current config ({h})",
                header.config_hash
            )));
        }
    }
    let expected: Vec<&str> = like.names().collect();
    if expected != header.names.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Integrity(
            "checkpoint tensors do not match the model's parameters".into(),
        ));
    }
    let names = &header.names;
    let params = read_store(dir, "params", names, Some(like))?;
    let exp_avg = read_store(dir, "exp_avg", names, Some(like))?;
    let exp_avg_sq = read_store(dir, "exp_avg_sq", names, Some(like))?;
    let slow = if header.lookahead {
        Some(read_store(dir, "slow", names, Some(like))?)
    } else {
        None
    };
    let losses = read_matrix::<f64>(&dir.join("losses.cef"))?.into_data();
    if losses.len() as u64 != header.step {
        return Err(Error::Integrity(format!(
            "loss history has {} entries but the header says step {}",
            losses.len(),
            header.step
        )));
    }
    let state = TrainState {
        params,
        optimizer: OptimizerState {
            step: header.step,
            exp_avg,
            exp_avg_sq,
            slow,
        },
        losses,
    };
    Ok((header, state))
}

/// Parameters only, e.g. for evaluation.
pub fn load_params(dir: &Path, like: &ParamStore<f64>) -> Result<ParamStore<f64>> {
    Ok(load(dir, None, like)?.1.params)
}
