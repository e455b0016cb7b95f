//! Append-only JSON Lines logs backing the completion, caption and
//! transcript caches.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// An append-only JSONL file. Appends from several threads are serialized
/// through an internal lock; each record is written with a single call.
pub struct JsonlLog<R> {
    path: PathBuf,
    writer: Mutex<Option<File>>,
    // set when the file ends without a newline (torn final write)
    torn_tail: bool,
    _record: PhantomData<fn(R) -> R>,
}

impl<R: Serialize + DeserializeOwned> JsonlLog<R> {
    /// Opens the log, returning it with every record already on disk.
    /// A truncated final line (from an interrupted write) is skipped.
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<(Self, Vec<R>)> {
        let path = path.into();
        let mut records = Vec::new();
        let mut torn_tail = false;
        if path.exists() {
            let bytes = fs::read(&path)?;
            torn_tail = bytes.last().is_some_and(|&b| b != b'\n');
            let reader = BufReader::new(bytes.as_slice());
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line) {
                    Ok(r) => records.push(r),
                    Err(e) => log::warn!("{}:{}: skipping unreadable record: {e}", path.display(), n + 1),
                }
            }
        }
        Ok((
            JsonlLog {
                path,
                writer: Mutex::new(None),
                torn_tail,
                _record: PhantomData,
            },
            records,
        ))
    }

    /// A log that is never read back; used for transcripts.
    pub fn create(path: impl Into<PathBuf>) -> Self {
        JsonlLog {
            path: path.into(),
            writer: Mutex::new(None),
            torn_tail: false,
            _record: PhantomData,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &R) -> std::io::Result<()> {
        let mut line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            if let Some(parent) = self.path.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
            if self.torn_tail {
                f.write_all(b"\n")?;
            }
            *guard = Some(f);
        }
        let f = guard.as_mut().expect("writer just opened");
        f.write_all(line.as_bytes())?;
        f.flush()
    }
}

/// RFC 3339 UTC with millisecond precision.
pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
