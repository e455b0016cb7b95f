//! Reference images from Wikipedia and Wikidata, and image-to-image
//! ranking against them.
//!
//! For Wikipedia, the articles returned by a full-text search are resolved
//! to their lead image through the page-image API. For Wikidata, entity
//! search results are resolved through their image property (P18) to a
//! Commons file URL. Every HTTP exchange can pass through an on-disk cache
//! keyed by the request URL; downloaded images land under
//! `cache_dir/<source>/<sha256 of URL>.<ext>` with a JSONL manifest.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Sample;
use crate::embeddings::Embedding;
use crate::jsonl::{timestamp, JsonlLog};
use crate::scoring::{similarity, Metric, Ranking, ScoringError};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("network error for {url}: {reason}")]
    NetworkError { url: String, reason: String },
    #[error("unexpected response from {url}: {reason}")]
    BadResponse { url: String, reason: String },
    #[error("not in offline cache: {0}")]
    OfflineMiss(String),
    #[error("kb cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embeddings come from different spaces: `{0}` vs `{1}`")]
    SpaceMismatch(String, String),
    #[error("unknown knowledge source `{0}`")]
    UnknownSource(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbSource {
    Wikipedia,
    Wikidata,
}

impl KbSource {
    pub const ALL: [KbSource; 2] = [KbSource::Wikipedia, KbSource::Wikidata];

    pub fn as_str(self) -> &'static str {
        match self {
            KbSource::Wikipedia => "wikipedia",
            KbSource::Wikidata => "wikidata",
        }
    }
}

impl fmt::Display for KbSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KbSource {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wikipedia" => Ok(KbSource::Wikipedia),
            "wikidata" => Ok(KbSource::Wikidata),
            other => Err(KbError::UnknownSource(other.to_string())),
        }
    }
}

/// An article (or entity) and the URL of its primary image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbHit {
    pub title: String,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbImage {
    pub title: String,
    pub source_url: String,
    /// Downloaded file under the cache directory.
    pub local_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbImageSet {
    pub phrase: String,
    pub source: KbSource,
    pub images: Vec<KbImage>,
}

/// Looks up primary images for a phrase and downloads them.
pub trait KbClient: Send + Sync {
    /// Hits in relevance order, at most `k`, each with an image.
    fn search(&self, phrase: &str, source: KbSource, k: usize) -> Result<Vec<KbHit>, KbError>;

    fn download(&self, url: &str) -> Result<Vec<u8>, KbError>;
}

/// GET a URL and return the body.
pub trait HttpFetch: Send + Sync {
    fn get(&self, url: &str) -> Result<Vec<u8>, KbError>;
}

/// Spaces requests at least `1 / rate` seconds apart across all threads.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn per_second(rate: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / rate.max(1e-3)),
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn wait(&self) {
        let slot = {
            let mut next = self.next.lock().unwrap_or_else(|p| p.into_inner());
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

/// Live HTTP with a global rate limit and bounded retries on transport
/// errors, 429 and 5xx.
pub struct ReqwestFetcher {
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
    max_attempts: u32,
    backoff: Duration,
}

impl ReqwestFetcher {
    pub fn new(user_agent: &str, requests_per_second: f64) -> Result<Self, KbError> {
        let client = reqwest::blocking::Client::builder()
            .user_agent(user_agent)
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| KbError::NetworkError {
                url: String::new(),
                reason: e.to_string(),
            })?;
        Ok(ReqwestFetcher {
            client,
            limiter: RateLimiter::per_second(requests_per_second),
            max_attempts: 4,
            backoff: Duration::from_secs(1),
        })
    }
}

impl HttpFetch for ReqwestFetcher {
    fn get(&self, url: &str) -> Result<Vec<u8>, KbError> {
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            self.limiter.wait();
            match self.client.get(url).send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.bytes().map(|b| b.to_vec()).map_err(|e| KbError::NetworkError {
                        url: url.to_string(),
                        reason: e.to_string(),
                    });
                }
                Ok(resp) if resp.status().as_u16() == 429 || resp.status().is_server_error() => {
                    last = format!("HTTP {}", resp.status());
                }
                Ok(resp) => {
                    return Err(KbError::NetworkError {
                        url: url.to_string(),
                        reason: format!("HTTP {}", resp.status()),
                    });
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.max_attempts {
                log::debug!("GET {url} failed ({last}); retry {attempt}");
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(KbError::NetworkError {
            url: url.to_string(),
            reason: last,
        })
    }
}

/// Never touches the network; every request is a miss.
pub struct Offline;

impl HttpFetch for Offline {
    fn get(&self, url: &str) -> Result<Vec<u8>, KbError> {
        Err(KbError::OfflineMiss(url.to_string()))
    }
}

fn url_digest(url: &str) -> String {
    hex::encode(Sha256::digest(url.as_bytes()))
}

/// On-disk response cache keyed by URL (`<dir>/<sha256 of URL>`).
pub struct CachedFetcher<F> {
    dir: PathBuf,
    inner: F,
    misses: AtomicUsize,
}

impl<F: HttpFetch> CachedFetcher<F> {
    pub fn new(dir: impl Into<PathBuf>, inner: F) -> Self {
        CachedFetcher {
            dir: dir.into(),
            inner,
            misses: AtomicUsize::new(0),
        }
    }

    /// Requests forwarded to the inner fetcher.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn entry_path(&self, url: &str) -> PathBuf {
        self.dir.join(url_digest(url))
    }

    /// Records a response, e.g. when building fixtures.
    pub fn store(&self, url: &str, body: &[u8]) -> Result<(), KbError> {
        let path = self.entry_path(url);
        write_atomic(&path, body)
    }
}

fn write_atomic(path: &Path, body: &[u8]) -> Result<(), KbError> {
    let cache_err = |source| KbError::Cache {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(cache_err)?;
    }
    let tmp = path.with_extension("part");
    fs::write(&tmp, body).map_err(cache_err)?;
    fs::rename(&tmp, path).map_err(cache_err)
}

impl<F: HttpFetch> HttpFetch for CachedFetcher<F> {
    fn get(&self, url: &str) -> Result<Vec<u8>, KbError> {
        let path = self.entry_path(url);
        if let Ok(body) = fs::read(&path) {
            return Ok(body);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let body = self.inner.get(url)?;
        self.store(url, &body)?;
        Ok(body)
    }
}

/// Client for the public Wikimedia APIs.
pub struct WikimediaClient<F> {
    fetcher: F,
    wikipedia_api: String,
    wikidata_api: String,
}

const COMMONS_FILE_PATH: &str = "https://commons.wikimedia.org/wiki/Special:FilePath/";

impl<F: HttpFetch> WikimediaClient<F> {
    pub fn new(fetcher: F) -> Self {
        WikimediaClient {
            fetcher,
            wikipedia_api: "https://en.wikipedia.org/w/api.php".into(),
            wikidata_api: "https://www.wikidata.org/w/api.php".into(),
        }
    }

    pub fn fetcher(&self) -> &F {
        &self.fetcher
    }

    fn api_url(base: &str, params: &[(&str, &str)]) -> String {
        let query = url::form_urlencoded::Serializer::new(String::new())
            .extend_pairs(params)
            .finish();
        format!("{base}?{query}")
    }

    pub fn wikipedia_search_url(&self, phrase: &str, k: usize) -> String {
        Self::api_url(
            &self.wikipedia_api,
            &[
                ("action", "query"),
                ("list", "search"),
                ("srsearch", phrase),
                ("srlimit", &k.to_string()),
                ("format", "json"),
                ("formatversion", "2"),
            ],
        )
    }

    pub fn wikipedia_images_url(&self, titles: &[String]) -> String {
        Self::api_url(
            &self.wikipedia_api,
            &[
                ("action", "query"),
                ("prop", "pageimages"),
                ("piprop", "original"),
                ("titles", &titles.join("|")),
                ("format", "json"),
                ("formatversion", "2"),
            ],
        )
    }

    pub fn wikidata_search_url(&self, phrase: &str, k: usize) -> String {
        Self::api_url(
            &self.wikidata_api,
            &[
                ("action", "wbsearchentities"),
                ("search", phrase),
                ("language", "en"),
                ("limit", &k.to_string()),
                ("format", "json"),
            ],
        )
    }

    pub fn wikidata_claims_url(&self, ids: &[String]) -> String {
        Self::api_url(
            &self.wikidata_api,
            &[
                ("action", "wbgetentities"),
                ("ids", &ids.join("|")),
                ("props", "claims|labels"),
                ("languages", "en"),
                ("format", "json"),
            ],
        )
    }

    fn get_json(&self, url: &str) -> Result<serde_json::Value, KbError> {
        let body = self.fetcher.get(url)?;
        serde_json::from_slice(&body).map_err(|e| KbError::BadResponse {
            url: url.to_string(),
            reason: e.to_string(),
        })
    }

    fn search_wikipedia(&self, phrase: &str, k: usize) -> Result<Vec<KbHit>, KbError> {
        let url = self.wikipedia_search_url(phrase, k);
        let value = self.get_json(&url)?;
        let titles: Vec<String> = value["query"]["search"]
            .as_array()
            .map(|hits| {
                hits.iter()
                    .filter_map(|h| h["title"].as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        if titles.is_empty() {
            return Ok(Vec::new());
        }
        let url = self.wikipedia_images_url(&titles);
        let value = self.get_json(&url)?;
        // map back through title normalization, then restore search order
        let mut normalized: HashMap<String, String> = HashMap::new();
        if let Some(norm) = value["query"]["normalized"].as_array() {
            for n in norm {
                if let (Some(from), Some(to)) = (n["from"].as_str(), n["to"].as_str()) {
                    normalized.insert(from.to_string(), to.to_string());
                }
            }
        }
        let mut images: HashMap<String, String> = HashMap::new();
        if let Some(pages) = value["query"]["pages"].as_array() {
            for p in pages {
                if let (Some(title), Some(src)) = (p["title"].as_str(), p["original"]["source"].as_str()) {
                    images.insert(title.to_string(), src.to_string());
                }
            }
        }
        Ok(titles
            .into_iter()
            .filter_map(|t| {
                let key = normalized.get(&t).cloned().unwrap_or_else(|| t.clone());
                images.get(&key).map(|src| KbHit {
                    title: t,
                    image_url: src.clone(),
                })
            })
            .take(k)
            .collect())
    }

    fn search_wikidata(&self, phrase: &str, k: usize) -> Result<Vec<KbHit>, KbError> {
        let url = self.wikidata_search_url(phrase, k);
        let value = self.get_json(&url)?;
        let ids: Vec<String> = value["search"]
            .as_array()
            .map(|hits| {
                hits.iter()
                    .filter_map(|h| h["id"].as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default();
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let url = self.wikidata_claims_url(&ids);
        let value = self.get_json(&url)?;
        let entities = &value["entities"];
        Ok(ids
            .into_iter()
            .filter_map(|id| {
                let entity = &entities[id.as_str()];
                let file = entity["claims"]["P18"][0]["mainsnak"]["datavalue"]["value"].as_str()?;
                let title = entity["labels"]["en"]["value"]
                    .as_str()
                    .map(str::to_string)
                    .unwrap_or_else(|| id.clone());
                let encoded: String =
                    url::form_urlencoded::byte_serialize(file.replace(' ', "_").as_bytes()).collect();
                Some(KbHit {
                    title,
                    image_url: format!("{COMMONS_FILE_PATH}{encoded}"),
                })
            })
            .take(k)
            .collect())
    }
}

impl<F: HttpFetch> KbClient for WikimediaClient<F> {
    fn search(&self, phrase: &str, source: KbSource, k: usize) -> Result<Vec<KbHit>, KbError> {
        match source {
            KbSource::Wikipedia => self.search_wikipedia(phrase, k),
            KbSource::Wikidata => self.search_wikidata(phrase, k),
        }
    }

    fn download(&self, url: &str) -> Result<Vec<u8>, KbError> {
        self.fetcher.get(url)
    }
}

/// Serves hits and image bytes from a recorded fixture.
///
/// The fixture JSON maps `source -> phrase -> [{"title", "image_url"}]`;
/// image URLs are paths relative to `image_root`.
pub struct RecordedKbClient {
    hits: HashMap<KbSource, HashMap<String, Vec<KbHit>>>,
    image_root: PathBuf,
    calls: AtomicUsize,
}

impl RecordedKbClient {
    pub fn from_file(fixture: &Path) -> Result<Self, KbError> {
        let cache_err = |source| KbError::Cache {
            path: fixture.display().to_string(),
            source,
        };
        let text = fs::read_to_string(fixture).map_err(cache_err)?;
        let hits: HashMap<KbSource, HashMap<String, Vec<KbHit>>> =
            serde_json::from_str(&text).map_err(|e| KbError::BadResponse {
                url: fixture.display().to_string(),
                reason: e.to_string(),
            })?;
        let image_root = fixture.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(RecordedKbClient {
            hits,
            image_root,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl KbClient for RecordedKbClient {
    fn search(&self, phrase: &str, source: KbSource, k: usize) -> Result<Vec<KbHit>, KbError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self
            .hits
            .get(&source)
            .and_then(|m| m.get(phrase))
            .map(|h| h.iter().take(k).cloned().collect())
            .unwrap_or_default())
    }

    fn download(&self, url: &str) -> Result<Vec<u8>, KbError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let path = self.image_root.join(url);
        fs::read(&path).map_err(|e| KbError::NetworkError {
            url: url.to_string(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    phrase: String,
    source: KbSource,
    k: usize,
    images: Vec<KbImage>,
    timestamp: String,
}

fn extension_of(url: &str) -> String {
    let path = url.split(['?', '#']).next().unwrap_or(url);
    let last = path.rsplit('/').next().unwrap_or("");
    match last.rsplit_once('.') {
        Some((_, ext)) if !ext.is_empty() && ext.len() <= 5 && ext.chars().all(|c| c.is_ascii_alphanumeric()) => {
            ext.to_ascii_lowercase()
        }
        _ => "jpg".to_string(),
    }
}

/// Image cache with a replayable manifest of completed lookups.
pub struct KbCache {
    dir: PathBuf,
    sets: Mutex<HashMap<(KbSource, String, usize), Vec<KbImage>>>,
    log: JsonlLog<ManifestRecord>,
}

impl KbCache {
    pub fn open(dir: &Path) -> Result<Self, KbError> {
        let path = dir.join("manifest.jsonl");
        let (log, records) = JsonlLog::<ManifestRecord>::open(&path).map_err(|source| KbError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        let sets = records
            .into_iter()
            .map(|r| ((r.source, r.phrase, r.k), r.images))
            .collect();
        Ok(KbCache {
            dir: dir.to_path_buf(),
            sets: Mutex::new(sets),
            log,
        })
    }

    pub fn image_path(&self, source: KbSource, url: &str) -> PathBuf {
        self.dir
            .join(source.as_str())
            .join(format!("{}.{}", url_digest(url), extension_of(url)))
    }
}

/// Fetches up to `k` primary images for a phrase. Zero hits yield an empty
/// set; a warm manifest entry is replayed without touching the client.
pub fn fetch_kb_images(
    client: &dyn KbClient,
    phrase: &str,
    source: KbSource,
    k: usize,
    cache: &KbCache,
) -> Result<KbImageSet, KbError> {
    let key = (source, phrase.to_string(), k);
    if let Some(images) = cache.sets.lock().unwrap().get(&key) {
        if images.iter().all(|i| i.local_path.is_file()) {
            return Ok(KbImageSet {
                phrase: phrase.to_string(),
                source,
                images: images.clone(),
            });
        }
    }
    let hits = client.search(phrase, source, k)?;
    let mut images = Vec::new();
    for hit in hits.into_iter().take(k) {
        let path = cache.image_path(source, &hit.image_url);
        if !path.is_file() {
            let bytes = client.download(&hit.image_url)?;
            write_atomic(&path, &bytes)?;
        }
        images.push(KbImage {
            title: hit.title,
            source_url: hit.image_url,
            local_path: path,
        });
    }
    let record = ManifestRecord {
        phrase: phrase.to_string(),
        source,
        k,
        images: images.clone(),
        timestamp: timestamp(),
    };
    cache.log.append(&record).map_err(|source| KbError::Cache {
        path: cache.log.path().display().to_string(),
        source,
    })?;
    cache.sets.lock().unwrap().insert(key, images.clone());
    Ok(KbImageSet {
        phrase: phrase.to_string(),
        source,
        images,
    })
}

/// How several reference images combine into one candidate score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KbAggregation {
    #[default]
    Max,
    Mean,
}

/// Per-candidate `agg_w sim(i_w, i)`; `None` when there are no reference
/// images.
pub fn kb_scores(
    sample: &Sample,
    kb_embs: &[Embedding],
    candidate_embs: &HashMap<String, Embedding>,
    metric: Metric,
    aggregation: KbAggregation,
) -> Result<Option<Vec<f64>>, KbError> {
    if kb_embs.is_empty() {
        return Ok(None);
    }
    let space = kb_embs[0].space_id();
    if let Some(bad) = kb_embs.iter().find(|e| e.space_id() != space) {
        return Err(KbError::SpaceMismatch(space.into(), bad.space_id().into()));
    }
    let scores = sample
        .candidates
        .iter()
        .map(|c| {
            let cand = candidate_embs
                .get(c)
                .ok_or_else(|| ScoringError::MissingEmbedding(c.clone()))?;
            if cand.space_id() != space {
                return Err(KbError::SpaceMismatch(space.into(), cand.space_id().into()));
            }
            let sims = kb_embs
                .iter()
                .map(|w| similarity(w, cand, metric))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(match aggregation {
                KbAggregation::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                KbAggregation::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
            })
        })
        .collect::<Result<Vec<_>, KbError>>()?;
    Ok(Some(scores))
}

/// Ranks candidates by similarity to the reference images.
pub fn rank_by_kb_images(
    sample: &Sample,
    kb_embs: &[Embedding],
    candidate_embs: &HashMap<String, Embedding>,
    metric: Metric,
) -> Result<Option<Ranking>, KbError> {
    Ok(kb_scores(sample, kb_embs, candidate_embs, metric, KbAggregation::Max)?
        .map(|s| Ranking::from_scores(sample.sample_id, &sample.candidates, &s)))
}
