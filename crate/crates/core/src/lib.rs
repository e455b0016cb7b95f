//! Building blocks for visual word sense disambiguation: given a short
//! ambiguous phrase and ten candidate images, rank the candidates.
//!
//! The crate covers the whole pipeline:
//! - [`dataset`]: data and gold files
//! - [`embeddings`]: encoder abstraction, mock encoder, on-disk store
//! - [`scoring`]: similarity metrics, per-image penalty, VL ranking
//! - [`enhancement`] and [`llm`]: LLM phrase enhancement with caching
//! - [`captions`]: captioning, beam-caption dedup, caption retrieval
//! - [`kb`]: Wikipedia/Wikidata reference images
//! - [`features`] and [`ltr`]: ranking features and a LambdaMART ranker
//! - [`qa`]: multiple-choice caption QA with chain-of-thought prompting
//! - [`evaluation`]: accuracy, MRR, reports
//!
//! Batch work is data-parallel through [`exec::Exec`] when the `parallel`
//! feature is enabled.

pub mod captions;
pub mod dataset;
pub mod embeddings;
pub mod enhancement;
pub mod evaluation;
pub mod exec;
pub mod features;
pub mod jsonl;
pub mod kb;
pub mod llm;
pub mod ltr;
pub mod qa;
pub mod scoring;

pub use dataset::{Dataset, Sample, CANDIDATES_PER_SAMPLE};
pub use embeddings::{Embedding, EmbeddingBackend, EmbeddingKind, EmbeddingStore};
pub use exec::Exec;
pub use scoring::{Metric, PenaltyTable, Ranking};
