use sha2::{Digest, Sha256};

use super::{EmbeddingBackend, EmbeddingError};

/// Deterministic, model-free encoder.
///
/// Each input is expanded into `dim` values by SHA-256 in counter mode over
/// `(seed, space_id, input)`, then scaled to unit L2 norm. Text and image
/// bytes go through the same expansion, so outputs depend only on the input
/// bytes and the space identity.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    dim: usize,
    space_id: String,
}

impl MockBackend {
    /// Panics when `dim < 2`.
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2, "mock backend needs dim >= 2, got {dim}");
        MockBackend {
            seed,
            dim,
            space_id: format!("mock-s{seed}-d{dim}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn expand(&self, input: &[u8]) -> Vec<f32> {
        let mut raw = Vec::with_capacity(self.dim);
        let mut counter: u64 = 0;
        while raw.len() < self.dim {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update((self.space_id.len() as u64).to_le_bytes());
            h.update(self.space_id.as_bytes());
            h.update(counter.to_le_bytes());
            h.update(input);
            let block = h.finalize();
            for word in block.chunks_exact(8) {
                if raw.len() == self.dim {
                    break;
                }
                let bits = u64::from_le_bytes(word.try_into().expect("8-byte chunk"));
                // 53 high bits → uniform in [-1, 1)
                let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
                raw.push(unit * 2.0 - 1.0);
            }
            counter += 1;
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        raw.iter().map(|v| (v / norm) as f32).collect()
    }
}

impl EmbeddingBackend for MockBackend {
    fn space_id(&self) -> &str {
        &self.space_id
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        Ok(self.expand(text.as_bytes()))
    }

    fn embed_image(&self, bytes: &[u8]) -> Result<Vec<f32>, EmbeddingError> {
        Ok(self.expand(bytes))
    }
}
