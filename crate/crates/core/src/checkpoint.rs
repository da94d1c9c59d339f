//! Training-state checkpoints.
//!
//! ```text
//! checkpoint/
//!   manifest.json   model config, counters, optimizer settings, loss history,
//!                   tensor table, SHA-256 of tensors.bin
//!   tensors.bin     little-endian f64, column-major, one section after another:
//!                   params, first moment, second moment[, best params]
//! ```
//!
//! A save/load cycle reproduces the state bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::OptimizerKind;
use crate::encoder::{Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::train::{BestSnapshot, EpochRecord, TrainingState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: f64,
    grad_clip: f64,
    steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BestEntry {
    epoch: usize,
    val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    epoch: usize,
    optimizer: OptimizerEntry,
    best: Option<BestEntry>,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
    tensors_sha256: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn push_params(buf: &mut Vec<u8>, p: &Params) {
    for (_, m) in p.named() {
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_params(template: &Params, bytes: &[u8], offset: &mut usize) -> Result<Params> {
    let mut out = template.clone();
    for m in out.tensors_mut() {
        let need = m.len() * 8;
        let chunk = bytes
            .get(*offset..*offset + need)
            .ok_or_else(|| corrupt("tensors.bin is shorter than the tensor table"))?;
        for (dst, src) in m.as_mut_slice().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8-byte chunk"));
        }
        *offset += need;
    }
    Ok(out)
}

/// Writes `state` into `dir`, creating it if needed.
pub fn save(state: &TrainingState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::with_capacity(8 * 4 * state.model.params.num_scalars());
    push_params(&mut bin, &state.model.params);
    push_params(&mut bin, &state.optimizer.first);
    push_params(&mut bin, &state.optimizer.second);
    if let Some(b) = &state.best {
        push_params(&mut bin, &b.params);
    }
    let opt = &state.optimizer;
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: state.model.config.clone(),
        epoch: state.epoch,
        optimizer: OptimizerEntry {
            kind: opt.kind,
            learning_rate: opt.learning_rate,
            momentum: opt.momentum,
            grad_clip: opt.grad_clip,
            steps: opt.steps,
        },
        best: state.best.as_ref().map(|b| BestEntry {
            epoch: b.epoch,
            val_loss: b.val_loss,
        }),
        history: state.history.clone(),
        tensors: state
            .model
            .params
            .named()
            .into_iter()
            .map(|(name, m)| TensorEntry {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
        tensors_sha256: hex::encode(Sha256::digest(&bin)),
    };
    let bin_path = dir.join(TENSORS);
    fs::write(&bin_path, &bin).map_err(|e| Error::io(bin_path, e))?;
    let man_path = dir.join(MANIFEST);
    fs::write(&man_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(man_path, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<TrainingState> {
    let man_path = dir.join(MANIFEST);
    let text = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint format_version {}",
            manifest.format_version
        )));
    }
    let bin_path = dir.join(TENSORS);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.tensors_sha256 {
        return Err(corrupt("tensors.bin does not match the manifest checksum"));
    }
    manifest.model.validate()?;
    let template = Params::zeros(&manifest.model)?;
    let table: Vec<TensorEntry> = template
        .named()
        .into_iter()
        .map(|(name, m)| TensorEntry {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
        })
        .collect();
    if table != manifest.tensors {
        return Err(corrupt("tensor table does not match the model configuration"));
    }
    let sections = 3 + usize::from(manifest.best.is_some());
    if bytes.len() != sections * 8 * template.num_scalars() {
        return Err(corrupt(format!(
            "tensors.bin holds {} bytes, expected {}",
            bytes.len(),
            sections * 8 * template.num_scalars()
        )));
    }
    let mut at = 0;
    let params = read_params(&template, &bytes, &mut at)?;
    let first = read_params(&template, &bytes, &mut at)?;
    let second = read_params(&template, &bytes, &mut at)?;
    let best = match manifest.best {
        Some(b) => Some(BestSnapshot {
            epoch: b.epoch,
            val_loss: b.val_loss,
            params: read_params(&template, &bytes, &mut at)?,
        }),
        None => None,
    };
    if manifest.history.len() != manifest.epoch {
        return Err(corrupt(format!(
            "history holds {} epochs but the counter says {}",
            manifest.history.len(),
            manifest.epoch
        )));
    }
    let o = manifest.optimizer;
    Ok(TrainingState {
        epoch: manifest.epoch,
        model: Model {
            config: manifest.model,
            params,
        },
        optimizer: Optimizer {
            kind: o.kind,
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            grad_clip: o.grad_clip,
            first,
            second,
            steps: o.steps,
        },
        best,
        history: manifest.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::par::Execution;
    use crate::synthetic::{generate, SyntheticSpec};
    use crate::train::train;

    fn trained(optimizer: OptimizerKind) -> TrainingState {
        let mut cfg = ExperimentConfig::default();
        cfg.model.hidden_dim = 6;
        cfg.training.epochs = 3;
        cfg.training.optimizer = optimizer;
        let data = generate(&SyntheticSpec {
            num_nodes: 16,
            ..Default::default()
        })
        .unwrap();
        train(&cfg, &data, Execution::Sequential).unwrap()
    }

    fn bits(p: &Params) -> Vec<u64> {
        p.named().iter().flat_map(|(_, m)| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let state = trained(kind);
            assert!(state.best.is_some());
            let dir = tempfile::tempdir().unwrap();
            save(&state, dir.path()).unwrap();
            let back = load(dir.path()).unwrap();
            assert_eq!(back, state);
            assert_eq!(bits(&back.model.params), bits(&state.model.params));
            assert_eq!(bits(&back.optimizer.second), bits(&state.optimizer.second));
            for (a, b) in back.history.iter().zip(&state.history) {
                assert_eq!(a.total.to_bits(), b.total.to_bits());
                assert_eq!(a.val_loss.map(f64::to_bits), b.val_loss.map(f64::to_bits));
            }
        }
    }

    #[test]
    fn detects_tampering() {
        let state = trained(OptimizerKind::Sgd);
        let dir = tempfile::tempdir().unwrap();
        save(&state, dir.path()).unwrap();
        let path = dir.path().join(TENSORS);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_directory_names_the_path() {
        let err = load(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ckpt"));
    }
}
