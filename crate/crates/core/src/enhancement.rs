//! Zero-shot phrase enhancement through prompt templates.
//!
//! A template wraps the phrase in a question or instruction; the LLM
//! continuation is appended to the rendered prompt to form the enhanced
//! phrase used for retrieval.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::exec::Exec;
use crate::jsonl::{timestamp, JsonlLog};
use crate::llm::{CompletionBackend, LlmError, LlmParams, RetryPolicy};

pub const PLACEHOLDER: &str = "<phrase>";

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("template `{name}` must contain `{PLACEHOLDER}` exactly once")]
    BadTemplate { name: String },
    #[error("phrase is blank")]
    BlankPhrase,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("completion cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    name: String,
    pattern: String,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, pattern: impl Into<String>) -> Result<Self, EnhanceError> {
        let name = name.into();
        let pattern = pattern.into();
        if pattern.matches(PLACEHOLDER).count() != 1 {
            return Err(EnhanceError::BadTemplate { name });
        }
        Ok(PromptTemplate { name, pattern })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn render(&self, phrase: &str) -> String {
        self.pattern.replace(PLACEHOLDER, phrase)
    }
}

const BUILTIN: [(&str, &str); 7] = [
    ("exact", "<phrase> "),
    ("what_is", "What is <phrase>?"),
    ("describe", "Describe <phrase>."),
    ("meaning_of", "What is the meaning of <phrase>?"),
    ("would_say", "To describe <phrase> I would say that"),
    ("could_describe", "I could describe <phrase> as "),
    ("write_description", "Write a description of <phrase>."),
];

/// The seven enhancement prompts, in registry order.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    BUILTIN
        .iter()
        .map(|(n, p)| PromptTemplate {
            name: n.to_string(),
            pattern: p.to_string(),
        })
        .collect()
}

pub fn find_template(name: &str) -> Option<PromptTemplate> {
    builtin_templates().into_iter().find(|t| t.name == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedPhrase {
    pub phrase: String,
    pub template_name: String,
    pub rendered_prompt: String,
    pub generation: String,
    pub enhanced_text: String,
    pub llm_id: String,
    /// Set when the completion failed and `enhanced_text` is the original phrase.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    llm_id: String,
    template: String,
    phrase: String,
    max_tokens: u32,
    temperature_bits: u64,
}

/// One completion as persisted in the cache file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub llm_id: String,
    pub template: String,
    pub phrase: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub generation: String,
    pub timestamp: String,
}

impl CompletionRecord {
    fn key(&self) -> CacheKey {
        CacheKey {
            llm_id: self.llm_id.clone(),
            template: self.template.clone(),
            phrase: self.phrase.clone(),
            max_tokens: self.max_tokens,
            temperature_bits: self.temperature.to_bits(),
        }
    }
}

/// JSONL-backed completion cache keyed by
/// `(llm_id, template, phrase, max_tokens, temperature)`.
pub struct EnhancementCache {
    entries: RwLock<HashMap<CacheKey, String>>,
    log: Option<JsonlLog<CompletionRecord>>,
}

impl EnhancementCache {
    pub fn open(path: &Path) -> Result<Self, EnhanceError> {
        let (log, records) = JsonlLog::<CompletionRecord>::open(path).map_err(|source| EnhanceError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        let entries = records
            .into_iter()
            .map(|r| (r.key(), r.generation))
            .collect();
        Ok(EnhancementCache {
            entries: RwLock::new(entries),
            log: Some(log),
        })
    }

    /// A cache that is never persisted.
    pub fn in_memory() -> Self {
        EnhancementCache {
            entries: RwLock::new(HashMap::new()),
            log: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(template: &str, phrase: &str, params: &LlmParams) -> CacheKey {
        CacheKey {
            llm_id: params.llm_id.clone(),
            template: template.to_string(),
            phrase: phrase.to_string(),
            max_tokens: params.max_tokens,
            temperature_bits: params.temperature.to_bits(),
        }
    }

    pub fn get(&self, template: &str, phrase: &str, params: &LlmParams) -> Option<String> {
        self.entries
            .read()
            .unwrap()
            .get(&Self::key(template, phrase, params))
            .cloned()
    }

    pub fn insert(
        &self,
        template: &str,
        phrase: &str,
        params: &LlmParams,
        generation: &str,
    ) -> Result<(), EnhanceError> {
        if let Some(log) = &self.log {
            let record = CompletionRecord {
                llm_id: params.llm_id.clone(),
                template: template.to_string(),
                phrase: phrase.to_string(),
                max_tokens: params.max_tokens,
                temperature: params.temperature,
                generation: generation.to_string(),
                timestamp: timestamp(),
            };
            log.append(&record).map_err(|source| EnhanceError::Cache {
                path: log.path().display().to_string(),
                source,
            })?;
        }
        self.entries
            .write()
            .unwrap()
            .insert(Self::key(template, phrase, params), generation.to_string());
        Ok(())
    }
}

fn compose(template: &PromptTemplate, phrase: &str, generation: String, llm_id: &str) -> EnhancedPhrase {
    let rendered_prompt = template.render(phrase);
    EnhancedPhrase {
        phrase: phrase.to_string(),
        template_name: template.name.clone(),
        enhanced_text: format!("{rendered_prompt}{generation}"),
        rendered_prompt,
        generation,
        llm_id: llm_id.to_string(),
        fallback: false,
    }
}

/// Enhances one phrase, consulting the cache before the backend.
pub fn enhance_phrase(
    llm: &dyn CompletionBackend,
    template: &PromptTemplate,
    phrase: &str,
    params: &LlmParams,
    cache: &EnhancementCache,
) -> Result<EnhancedPhrase, EnhanceError> {
    enhance_phrase_with_retry(llm, template, phrase, params, cache, &RetryPolicy::default())
}

pub fn enhance_phrase_with_retry(
    llm: &dyn CompletionBackend,
    template: &PromptTemplate,
    phrase: &str,
    params: &LlmParams,
    cache: &EnhancementCache,
    retry: &RetryPolicy,
) -> Result<EnhancedPhrase, EnhanceError> {
    if phrase.trim().is_empty() {
        return Err(EnhanceError::BlankPhrase);
    }
    if let Some(generation) = cache.get(&template.name, phrase, params) {
        return Ok(compose(template, phrase, generation, &params.llm_id));
    }
    let prompt = template.render(phrase);
    let generation = retry.call(|| llm.complete(&prompt, params))?;
    if generation.is_empty() {
        log::info!("empty generation for template `{}` on `{phrase}`", template.name);
    }
    cache.insert(&template.name, phrase, params, &generation)?;
    Ok(compose(template, phrase, generation, &params.llm_id))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub template_name: String,
    pub sample_id: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct EnhancementRun {
    /// Keyed by `(template_name, sample_id)`.
    pub entries: BTreeMap<(String, usize), EnhancedPhrase>,
    pub failures: Vec<CellFailure>,
}

impl EnhancementRun {
    pub fn get(&self, template: &str, sample_id: usize) -> Option<&EnhancedPhrase> {
        self.entries.get(&(template.to_string(), sample_id))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitOptions {
    pub exec: Exec,
    /// Maximum backend calls in flight.
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            exec: Exec::default(),
            parallelism: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// Enhances every phrase of a split with every template. Failed cells fall
/// back to the original phrase and are listed in `failures`.
pub fn enhance_split(
    llm: &dyn CompletionBackend,
    templates: &[PromptTemplate],
    dataset: &Dataset,
    params: &LlmParams,
    cache: &EnhancementCache,
    options: &SplitOptions,
) -> EnhancementRun {
    let cells: Vec<(&PromptTemplate, usize, &str)> = templates
        .iter()
        .flat_map(|t| {
            dataset
                .samples
                .iter()
                .map(move |s| (t, s.sample_id, s.phrase.as_str()))
        })
        .collect();
    let results = options.exec.map_bounded(&cells, options.parallelism, |(t, _, phrase)| {
        enhance_phrase_with_retry(llm, t, phrase, params, cache, &options.retry)
    });
    let mut entries = BTreeMap::new();
    let mut failures = Vec::new();
    for ((template, sample_id, phrase), result) in cells.into_iter().zip(results) {
        let entry = match result {
            Ok(e) => e,
            Err(err) => {
                log::warn!("enhancement failed for `{}` / sample {sample_id}: {err}", template.name);
                failures.push(CellFailure {
                    template_name: template.name.clone(),
                    sample_id,
                    error: err.to_string(),
                });
                EnhancedPhrase {
                    phrase: phrase.to_string(),
                    template_name: template.name.clone(),
                    rendered_prompt: template.render(phrase),
                    generation: String::new(),
                    enhanced_text: phrase.to_string(),
                    llm_id: params.llm_id.clone(),
                    fallback: true,
                }
            }
        };
        entries.insert((template.name.clone(), sample_id), entry);
    }
    EnhancementRun { entries, failures }
}
