//! Text and image encoders that map into a shared vector space.
//!
//! Real encoders sit behind [`EmbeddingBackend`]; tests and the bundled
//! fixture use [`MockBackend`]. Computed vectors can be persisted in an
//! [`EmbeddingStore`].

mod http;
mod mock;
mod store;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;

pub use http::HttpEmbedder;
pub use mock::MockBackend;
pub use store::EmbeddingStore;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("image `{id}` is unreadable: {reason}")]
    ImageUnreadable { id: String, reason: String },
    #[error("dimension mismatch in space `{space_id}`: expected {expected}, got {actual}")]
    DimMismatch {
        space_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in embedding from space `{0}`")]
    NonFinite(String),
    #[error("embedding store error: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Text,
    Image,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Text => "text",
            EmbeddingKind::Image => "image",
        }
    }
}

/// A finite vector tagged with the space that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    space_id: String,
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(space_id: impl Into<String>, values: Vec<f32>) -> Result<Self, EmbeddingError> {
        let space_id = space_id.into();
        if values.is_empty() {
            return Err(EmbeddingError::EmptyInput(format!(
                "zero-length vector in space `{space_id}`"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(space_id));
        }
        Ok(Embedding { space_id, values })
    }

    pub fn space_id(&self) -> &str {
        &self.space_id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Whether a backend tolerates concurrent inference calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    Concurrent,
    Serial,
}

/// An encoder producing vectors in one joint text/image space.
pub trait EmbeddingBackend: Send + Sync {
    /// Identity of the vector space, e.g. a model name.
    fn space_id(&self) -> &str;

    fn concurrency(&self) -> Concurrency {
        Concurrency::Concurrent
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError>;

    fn embed_image(&self, bytes: &[u8]) -> Result<Vec<f32>, EmbeddingError>;
}

fn exec_for(backend: &dyn EmbeddingBackend, exec: Exec) -> Exec {
    match backend.concurrency() {
        Concurrency::Concurrent => exec,
        Concurrency::Serial => Exec::Sequential,
    }
}

fn finish_batch(
    space_id: &str,
    raw: Vec<Vec<f32>>,
) -> Result<Vec<Embedding>, EmbeddingError> {
    let out = raw
        .into_iter()
        .map(|v| Embedding::new(space_id, v))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(first) = out.first() {
        let dim = first.dim();
        if let Some(bad) = out.iter().find(|e| e.dim() != dim) {
            return Err(EmbeddingError::DimMismatch {
                space_id: space_id.to_string(),
                expected: dim,
                actual: bad.dim(),
            });
        }
    }
    Ok(out)
}

/// Embeds texts, one vector per input in input order.
pub fn embed_texts(
    backend: &dyn EmbeddingBackend,
    texts: &[String],
) -> Result<Vec<Embedding>, EmbeddingError> {
    embed_texts_with(Exec::default(), backend, texts)
}

pub fn embed_texts_with(
    exec: Exec,
    backend: &dyn EmbeddingBackend,
    texts: &[String],
) -> Result<Vec<Embedding>, EmbeddingError> {
    if texts.is_empty() {
        return Err(EmbeddingError::EmptyInput("no texts to embed".into()));
    }
    if let Some(pos) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbeddingError::EmptyInput(format!("text #{pos} is blank")));
    }
    let raw = exec_for(backend, exec).try_map(texts, |t| backend.embed_text(t))?;
    finish_batch(backend.space_id(), raw)
}

/// Embeds image files named by identifier under `image_dir`.
pub fn embed_images(
    backend: &dyn EmbeddingBackend,
    image_ids: &[String],
    image_dir: &Path,
) -> Result<Vec<Embedding>, EmbeddingError> {
    embed_images_with(Exec::default(), backend, image_ids, image_dir)
}

pub fn embed_images_with(
    exec: Exec,
    backend: &dyn EmbeddingBackend,
    image_ids: &[String],
    image_dir: &Path,
) -> Result<Vec<Embedding>, EmbeddingError> {
    let paths: Vec<(String, std::path::PathBuf)> = image_ids
        .iter()
        .map(|id| (id.clone(), image_dir.join(id)))
        .collect();
    embed_image_files_with(exec, backend, &paths)
}

/// Embeds arbitrary image files; each entry pairs an identifier used in
/// error messages with the file path.
pub fn embed_image_files_with(
    exec: Exec,
    backend: &dyn EmbeddingBackend,
    files: &[(String, std::path::PathBuf)],
) -> Result<Vec<Embedding>, EmbeddingError> {
    if files.is_empty() {
        return Err(EmbeddingError::EmptyInput("no images to embed".into()));
    }
    let raw = exec_for(backend, exec).try_map(files, |(id, path)| {
        let bytes = fs::read(path).map_err(|e| EmbeddingError::ImageUnreadable {
            id: id.clone(),
            reason: e.to_string(),
        })?;
        backend.embed_image(&bytes)
    })?;
    finish_batch(backend.space_id(), raw)
}
