//! JSON file helpers shared by every persisted format.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let wrap = |e: Error| Error::File {
        path: path.to_path_buf(),
        source: Box::new(e),
    };
    let bytes = fs::read(path).map_err(|e| wrap(e.into()))?;
    serde_json::from_slice(&bytes).map_err(|e| wrap(e.into()))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `value` next to `path` and renames it into place, so readers only
/// ever observe a complete file.
pub fn write_json_atomic<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_json_bytes(value)?;
    write_bytes_atomic(path, &bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: Box::new(e.into()),
    })
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)
}
