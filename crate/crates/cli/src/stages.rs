//! Stage completion markers, input digests and the cache-root lock.
//!
//! A stage is satisfied when `stages/<name>.json` records the digest the
//! stage would compute now and every output it lists still exists.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: String,
    pub digest: String,
    /// The config slice and upstream digests the digest covers.
    pub inputs: Value,
    pub outputs: Vec<PathBuf>,
    pub completed_at: String,
}

/// Hex SHA-256 over the stage name and the canonical JSON of its inputs.
/// Object keys serialize sorted, so equal inputs give equal digests.
pub fn digest(stage: &str, inputs: &Value) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_string(inputs).expect("json value serializes").as_bytes());
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn marker_path(root: &Path, stage: &str) -> PathBuf {
    root.join("stages").join(format!("{stage}.json"))
}

pub fn read_marker(root: &Path, stage: &str) -> Option<StageMarker> {
    let text = fs::read_to_string(marker_path(root, stage)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn is_satisfied(root: &Path, stage: &str, digest: &str) -> bool {
    read_marker(root, stage).is_some_and(|m| m.digest == digest && m.outputs.iter().all(|p| p.exists()))
}

pub fn write_marker(root: &Path, marker: &StageMarker) -> Result<(), PipelineError> {
    let body = serde_json::to_string_pretty(marker).expect("marker serializes");
    write_atomic(&marker_path(root, &marker.stage), body.as_bytes())
}

/// Write-temp-then-rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut body = serde_json::to_string_pretty(value).expect("artifact serializes");
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|_| PipelineError::MissingUpstream {
        stage: stage.to_string(),
        artifact: path.to_path_buf(),
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))
}

/// Exclusive hold on a cache root, released on drop.
#[derive(Debug)]
pub struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    pub fn acquire(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(|e| PipelineError::io(root, e))?;
        let path = root.join(".lock");
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => PipelineError::Locked(path.clone()),
                _ => PipelineError::io(&path, e),
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(CacheLock { path })
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
