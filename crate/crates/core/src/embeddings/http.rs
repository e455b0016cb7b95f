use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Concurrency, EmbeddingBackend, EmbeddingError};

/// Adapter for an encoder served over HTTP (e.g. a CLIP/ALIGN/BLIP model
/// behind a small inference server).
///
/// Requests are `POST {base_url}/embed` with a JSON body of either
/// `{"text": "..."}` or `{"image_b64": "..."}`; the server answers with
/// `{"embedding": [f32, ...]}`.
pub struct HttpEmbedder {
    base_url: String,
    space_id: String,
    client: reqwest::blocking::Client,
    serial: bool,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Request<'a> {
    Text { text: &'a str },
    Image { image_b64: String },
}

#[derive(Deserialize)]
struct Response {
    embedding: Vec<f32>,
}

impl HttpEmbedder {
    pub fn new(
        base_url: impl Into<String>,
        space_id: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbeddingError::BackendUnavailable(e.to_string()))?;
        Ok(HttpEmbedder {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            space_id: space_id.into(),
            client,
            serial: false,
        })
    }

    /// Marks the server as single-threaded so callers serialize requests.
    pub fn serial(mut self, serial: bool) -> Self {
        self.serial = serial;
        self
    }

    fn call(&self, body: &Request<'_>) -> Result<Vec<f32>, EmbeddingError> {
        let unavailable = |e: reqwest::Error| EmbeddingError::BackendUnavailable(e.to_string());
        let resp = self
            .client
            .post(format!("{}/embed", self.base_url))
            .json(body)
            .send()
            .map_err(unavailable)?
            .error_for_status()
            .map_err(unavailable)?;
        Ok(resp.json::<Response>().map_err(unavailable)?.embedding)
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn space_id(&self) -> &str {
        &self.space_id
    }

    fn concurrency(&self) -> Concurrency {
        if self.serial {
            Concurrency::Serial
        } else {
            Concurrency::Concurrent
        }
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        self.call(&Request::Text { text })
    }

    fn embed_image(&self, bytes: &[u8]) -> Result<Vec<f32>, EmbeddingError> {
        self.call(&Request::Image {
            image_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
        })
    }
}
