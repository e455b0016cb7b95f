//! Backend construction. Stages ask for a backend only when they have work
//! for it, so a satisfied stage never needs credentials or a server.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use vwsd_core::captions::{CaptionError, CaptionMode, Captioner, HttpCaptioner, MockCaptioner};
use vwsd_core::embeddings::{Concurrency, EmbeddingBackend, EmbeddingError, HttpEmbedder, MockBackend};
use vwsd_core::kb::{
    CachedFetcher, KbClient, KbError, KbHit, KbSource, Offline, RecordedKbClient, ReqwestFetcher,
    WikimediaClient,
};
use vwsd_core::llm::{CompletionBackend, LlmError, LlmParams, MockLlm, OpenAiBackend};

use crate::config::{CaptionerConfig, EmbedderConfig, KbClientConfig, LlmConfig, PipelineConfig};
use crate::error::PipelineError;

pub trait BackendSource: Send + Sync {
    fn embedder(&self) -> Result<Arc<dyn EmbeddingBackend>, PipelineError>;
    fn llm(&self) -> Result<Arc<dyn CompletionBackend>, PipelineError>;
    fn captioner(&self) -> Result<Arc<dyn Captioner>, PipelineError>;
    fn kb(&self) -> Result<Arc<dyn KbClient>, PipelineError>;
}

type Slot<T> = OnceLock<Result<Arc<T>, String>>;

/// Backends described by the configuration, built on first use.
pub struct ConfiguredBackends {
    cfg: PipelineConfig,
    embedder: Slot<dyn EmbeddingBackend>,
    llm: Slot<dyn CompletionBackend>,
    captioner: Slot<dyn Captioner>,
    kb: Slot<dyn KbClient>,
}

impl ConfiguredBackends {
    pub fn new(cfg: &PipelineConfig) -> Self {
        ConfiguredBackends {
            cfg: cfg.clone(),
            embedder: OnceLock::new(),
            llm: OnceLock::new(),
            captioner: OnceLock::new(),
            kb: OnceLock::new(),
        }
    }
}

fn get<T: ?Sized>(
    slot: &Slot<T>,
    what: &str,
    build: impl FnOnce() -> Result<Arc<T>, String>,
) -> Result<Arc<T>, PipelineError> {
    slot.get_or_init(build)
        .clone()
        .map_err(|e| PipelineError::stage(what, e))
}

impl BackendSource for ConfiguredBackends {
    fn embedder(&self) -> Result<Arc<dyn EmbeddingBackend>, PipelineError> {
        get(&self.embedder, "embedder", || match &self.cfg.embedder {
            EmbedderConfig::Mock { seed, dim } => {
                Ok(Arc::new(MockBackend::new(*seed, *dim)) as Arc<dyn EmbeddingBackend>)
            }
            EmbedderConfig::Http {
                url,
                space_id,
                timeout_secs,
                serial,
            } => HttpEmbedder::new(url.clone(), space_id.clone(), Duration::from_secs(*timeout_secs))
                .map(|e| Arc::new(e.serial(*serial)) as Arc<dyn EmbeddingBackend>)
                .map_err(|e| e.to_string()),
        })
    }

    fn llm(&self) -> Result<Arc<dyn CompletionBackend>, PipelineError> {
        get(&self.llm, "llm", || match &self.cfg.llm {
            LlmConfig::Mock { seed } => Ok(Arc::new(MockLlm::new(*seed)) as Arc<dyn CompletionBackend>),
            LlmConfig::Openai { model, chat } => OpenAiBackend::from_env(model.clone(), *chat)
                .map(|b| Arc::new(b) as Arc<dyn CompletionBackend>)
                .map_err(|e| e.to_string()),
        })
    }

    fn captioner(&self) -> Result<Arc<dyn Captioner>, PipelineError> {
        get(&self.captioner, "captioner", || match &self.cfg.captioner {
            CaptionerConfig::Mock { seed } => Ok(Arc::new(MockCaptioner::new(*seed)) as Arc<dyn Captioner>),
            CaptionerConfig::Http { url, id } => HttpCaptioner::new(url.clone(), id.clone())
                .map(|c| Arc::new(c) as Arc<dyn Captioner>)
                .map_err(|e| e.to_string()),
        })
    }

    fn kb(&self) -> Result<Arc<dyn KbClient>, PipelineError> {
        let http_cache = self.cfg.cache_root.join("kb").join("http");
        get(&self.kb, "kb", || match &self.cfg.kb.client {
            None => Err("no kb client configured".into()),
            Some(KbClientConfig::Recorded { fixture }) => RecordedKbClient::from_file(fixture)
                .map(|c| Arc::new(c) as Arc<dyn KbClient>)
                .map_err(|e| e.to_string()),
            Some(KbClientConfig::Wikimedia { offline: true, .. }) => Ok(Arc::new(WikimediaClient::new(
                CachedFetcher::new(&http_cache, Offline),
            )) as Arc<dyn KbClient>),
            Some(KbClientConfig::Wikimedia {
                requests_per_second,
                user_agent,
                ..
            }) => ReqwestFetcher::new(user_agent, *requests_per_second)
                .map(|f| Arc::new(WikimediaClient::new(CachedFetcher::new(&http_cache, f))) as Arc<dyn KbClient>)
                .map_err(|e| e.to_string()),
        })
    }
}

/// Pre-built backends, e.g. call-counting wrappers in tests.
#[derive(Clone)]
pub struct FixedBackends {
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub llm: Arc<dyn CompletionBackend>,
    pub captioner: Arc<dyn Captioner>,
    pub kb: Option<Arc<dyn KbClient>>,
}

impl BackendSource for FixedBackends {
    fn embedder(&self) -> Result<Arc<dyn EmbeddingBackend>, PipelineError> {
        Ok(self.embedder.clone())
    }

    fn llm(&self) -> Result<Arc<dyn CompletionBackend>, PipelineError> {
        Ok(self.llm.clone())
    }

    fn captioner(&self) -> Result<Arc<dyn Captioner>, PipelineError> {
        Ok(self.captioner.clone())
    }

    fn kb(&self) -> Result<Arc<dyn KbClient>, PipelineError> {
        self.kb
            .clone()
            .ok_or_else(|| PipelineError::stage("kb", "no kb client configured"))
    }
}

/// Wraps a backend and counts every call made through it.
pub struct Counting<T> {
    inner: T,
    calls: AtomicUsize,
}

impl<T> Counting<T> {
    pub fn new(inner: T) -> Self {
        Counting {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self) -> &T {
        self.calls.fetch_add(1, Ordering::SeqCst);
        &self.inner
    }
}

impl<T: EmbeddingBackend> EmbeddingBackend for Counting<T> {
    fn space_id(&self) -> &str {
        self.inner.space_id()
    }

    fn concurrency(&self) -> Concurrency {
        self.inner.concurrency()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        self.tick().embed_text(text)
    }

    fn embed_image(&self, bytes: &[u8]) -> Result<Vec<f32>, EmbeddingError> {
        self.tick().embed_image(bytes)
    }
}

impl<T: CompletionBackend> CompletionBackend for Counting<T> {
    fn complete(&self, prompt: &str, params: &LlmParams) -> Result<String, LlmError> {
        self.tick().complete(prompt, params)
    }
}

impl<T: Captioner> Captioner for Counting<T> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn caption(&self, image: &[u8], mode: CaptionMode) -> Result<Vec<String>, CaptionError> {
        self.tick().caption(image, mode)
    }
}

impl<T: KbClient> KbClient for Counting<T> {
    fn search(&self, phrase: &str, source: KbSource, k: usize) -> Result<Vec<KbHit>, KbError> {
        self.tick().search(phrase, source, k)
    }

    fn download(&self, url: &str) -> Result<Vec<u8>, KbError> {
        self.tick().download(url)
    }
}

/// Counting wrappers around the configured mock backends, plus handles to
/// read the counters.
pub struct CountingMocks {
    pub embedder: Arc<Counting<MockBackend>>,
    pub llm: Arc<Counting<MockLlm>>,
    pub captioner: Arc<Counting<MockCaptioner>>,
    pub kb: Option<Arc<Counting<RecordedKbClient>>>,
}

impl CountingMocks {
    /// Fails unless every configured backend is a mock (or recorded KB).
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let not_mock = |what: &str| PipelineError::Config(format!("{what} is not a mock backend"));
        let embedder = match cfg.embedder {
            EmbedderConfig::Mock { seed, dim } => MockBackend::new(seed, dim),
            _ => return Err(not_mock("embedder")),
        };
        let llm = match cfg.llm {
            LlmConfig::Mock { seed } => MockLlm::new(seed),
            _ => return Err(not_mock("llm")),
        };
        let captioner = match cfg.captioner {
            CaptionerConfig::Mock { seed } => MockCaptioner::new(seed),
            _ => return Err(not_mock("captioner")),
        };
        let kb = match &cfg.kb.client {
            None => None,
            Some(KbClientConfig::Recorded { fixture }) => Some(Arc::new(Counting::new(
                RecordedKbClient::from_file(Path::new(fixture)).map_err(|e| PipelineError::stage("kb", e))?,
            ))),
            Some(_) => return Err(not_mock("kb client")),
        };
        Ok(CountingMocks {
            embedder: Arc::new(Counting::new(embedder)),
            llm: Arc::new(Counting::new(llm)),
            captioner: Arc::new(Counting::new(captioner)),
            kb,
        })
    }

    pub fn backends(&self) -> FixedBackends {
        FixedBackends {
            embedder: self.embedder.clone(),
            llm: self.llm.clone(),
            captioner: self.captioner.clone(),
            kb: self.kb.clone().map(|k| k as Arc<dyn KbClient>),
        }
    }

    pub fn total_calls(&self) -> usize {
        self.embedder.calls()
            + self.llm.calls()
            + self.captioner.calls()
            + self.kb.as_ref().map_or(0, |k| k.calls())
    }
}
