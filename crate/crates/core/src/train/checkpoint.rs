//! Checkpoint files: one JSON header line followed by every parameter value
//! as little-endian f64, in registration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::PlanningModel;
use crate::config::RunConfig;
use crate::error::{PlannerError, Result};

pub const CHECKPOINT_FORMAT: &str = "moe-planner-checkpoint/1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Epoch whose parameters are stored (1-based, end-to-end stage).
    pub epoch: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub params: Vec<ParamMeta>,
}

pub fn checkpoint_bytes(model: &PlanningModel, epoch: usize) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        tool_version: TOOL_VERSION.into(),
        config_hash: model.config.hash(),
        epoch,
        seed: model.config.train.seed,
        config: model.config.clone(),
        params: model
            .store
            .iter()
            .map(|(_, e)| ParamMeta {
                name: e.name.clone(),
                kind: e.kind.name().into(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, e) in model.store.iter() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &PlanningModel, epoch: usize, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, epoch)).map_err(|e| PlannerError::io(path, e))
}

/// Rebuilds the model described by the header and loads its parameters.
/// `path` only labels errors.
pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, PlanningModel)> {
    let fmt = |msg: String| PlannerError::format(path, msg);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| fmt(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(PlannerError::Version {
            path: path.to_path_buf(),
            found: header.format,
            expected: CHECKPOINT_FORMAT.into(),
        });
    }
    let hash = header.config.hash();
    if hash != header.config_hash {
        return Err(PlannerError::HashMismatch {
            checkpoint: header.config_hash,
            expected: hash,
        });
    }
    let mut model = PlanningModel::new(&header.config)?;
    let metas: Vec<ParamMeta> = model
        .store
        .iter()
        .map(|(_, e)| ParamMeta {
            name: e.name.clone(),
            kind: e.kind.name().into(),
            shape: e.value.shape().to_vec(),
        })
        .collect();
    if metas != header.params {
        return Err(fmt("parameter list does not match the model built from its config".into()));
    }
    let blob = &bytes[nl + 1..];
    let expected = model.store.num_values() * 8;
    if blob.len() != expected {
        return Err(fmt(format!("parameter blob has {} bytes, expected {expected}", blob.len())));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for slot in model.store.get_mut(id).data_mut() {
            *slot = values.next().expect("length checked");
        }
    }
    Ok((header, model))
}

/// Loads a checkpoint, refusing it when `expected_hash` is given and differs.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<(CheckpointHeader, PlanningModel)> {
    let bytes = std::fs::read(path).map_err(|e| PlannerError::io(path, e))?;
    let (header, model) = parse_checkpoint(&bytes, path)?;
    if let Some(want) = expected_hash {
        if want != header.config_hash {
            return Err(PlannerError::HashMismatch {
                checkpoint: header.config_hash,
                expected: want.into(),
            });
        }
    }
    Ok((header, model))
}
