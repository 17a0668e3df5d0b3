use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = serde_json::to_vec(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub(crate) fn check_digest(artifact: &str, expected: Option<&str>, found: Option<&str>) -> Result<()> {
    match (expected, found) {
        (Some(e), Some(f)) if e != f => Err(Error::DigestMismatch {
            artifact: artifact.to_owned(),
            expected: e.to_owned(),
            found: f.to_owned(),
        }),
        (Some(e), None) => Err(Error::DigestMismatch {
            artifact: artifact.to_owned(),
            expected: e.to_owned(),
            found: "<none>".to_owned(),
        }),
        _ => Ok(()),
    }
}

/// Round half up, as used for background quotas.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}
