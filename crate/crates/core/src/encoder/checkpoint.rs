//! Versioned JSON checkpoint: config plus named flat parameter arrays.
//!
//! Floats are written in shortest round-trip form, so save → load → save
//! reproduces the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::model::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_FORMAT: &str = "mag-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    config: EncoderConfig,
    params: Vec<StoredParam>,
}

pub fn to_bytes(model: &EncoderModel) -> Result<Vec<u8>> {
    let stored = StoredCheckpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| StoredParam {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&stored).map_err(|e| Error::Parse {
        context: "checkpoint".into(),
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderModel> {
    let stored: StoredCheckpoint = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        context: "checkpoint".into(),
        message: e.to_string(),
    })?;
    if stored.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse {
            context: "checkpoint".into(),
            message: format!("unexpected format tag `{}`", stored.format),
        });
    }
    if stored.version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            context: "checkpoint".into(),
            message: format!("unsupported version {}", stored.version),
        });
    }
    let mut params = ParamSet::new();
    for p in stored.params {
        params.insert(p.name, Tensor::new(p.shape, p.data)?)?;
    }
    EncoderModel::from_parts(stored.config, params)
}

pub fn save(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<EncoderModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
