//! Result files keyed by a hash of the run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn to_json<T: Serialize>(value: &T, pretty: bool) -> Result<Vec<u8>> {
    let r = if pretty {
        serde_json::to_vec_pretty(value)
    } else {
        serde_json::to_vec(value)
    };
    r.map_err(|e| Error::Parse {
        context: "json output".into(),
        message: e.to_string(),
    })
}

/// First 16 hex digits of SHA-256 over the compact JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let digest = Sha256::digest(to_json(config, false)?);
    Ok(hex::encode(&digest[..8]))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn result_path(dir: impl AsRef<Path>, kind: &str, hash: &str) -> PathBuf {
    dir.as_ref().join(format!("{kind}-{hash}.json"))
}

/// Pretty JSON plus trailing newline; parent directories are created.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = to_json(value, true)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
