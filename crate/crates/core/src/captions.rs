//! Caption generation, beam-caption deduplication, and phrase-to-caption
//! ranking.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Sample;
use crate::embeddings::{embed_texts, Embedding, EmbeddingBackend, EmbeddingError};
use crate::jsonl::{timestamp, JsonlLog};
use crate::scoring::{similarity, Metric, Ranking, ScoringError};

/// Upper bound on beam captions kept per image.
pub const MAX_BEAM_CAPTIONS: usize = 10;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("image `{id}` is unreadable: {reason}")]
    ImageUnreadable { id: String, reason: String },
    #[error("captioner unavailable: {0}")]
    BackendUnavailable(String),
    #[error("captioner returned no usable caption for `{0}`")]
    NoCaptions(String),
    #[error("no captions for candidate `{0}`")]
    MissingCaptions(String),
    #[error("unknown caption mode `{0}`")]
    UnknownMode(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("caption cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionMode {
    Greedy,
    Beam,
}

impl CaptionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CaptionMode::Greedy => "greedy",
            CaptionMode::Beam => "beam",
        }
    }
}

impl fmt::Display for CaptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaptionMode {
    type Err = CaptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(CaptionMode::Greedy),
            "beam" => Ok(CaptionMode::Beam),
            other => Err(CaptionError::UnknownMode(other.to_string())),
        }
    }
}

/// Image captioning model.
///
/// For beam mode the adapter owns the decoding configuration (beam count,
/// sampling, number of returned sequences) and should encode it in `id`.
pub trait Captioner: Send + Sync {
    fn id(&self) -> &str;

    fn caption(&self, image: &[u8], mode: CaptionMode) -> Result<Vec<String>, CaptionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub image_id: String,
    pub mode: CaptionMode,
    /// Deduplicated captions used downstream.
    pub captions: Vec<String>,
    /// Captioner output before deduplication.
    pub raw: Vec<String>,
    pub captioner_id: String,
}

impl CaptionSet {
    /// Builds a set from raw captioner output, applying the mode's
    /// post-processing.
    pub fn from_raw(
        image_id: impl Into<String>,
        mode: CaptionMode,
        raw: Vec<String>,
        captioner_id: impl Into<String>,
    ) -> Result<Self, CaptionError> {
        let image_id = image_id.into();
        let captions = match mode {
            CaptionMode::Greedy => raw
                .iter()
                .map(|c| c.trim())
                .find(|c| !c.is_empty())
                .map(|c| vec![c.to_string()])
                .unwrap_or_default(),
            CaptionMode::Beam => {
                let capped: Vec<String> = raw.iter().take(MAX_BEAM_CAPTIONS).cloned().collect();
                dedup_captions(&capped)
            }
        };
        if captions.is_empty() {
            return Err(CaptionError::NoCaptions(image_id));
        }
        Ok(CaptionSet {
            image_id,
            mode,
            captions,
            raw,
            captioner_id: captioner_id.into(),
        })
    }
}

fn normalize(caption: &str) -> String {
    caption.trim().to_lowercase()
}

/// Drops blank captions and every caption equal to or contained in another
/// one (compared trimmed and lowercased). Survivors keep their
/// first-occurrence order; among exact duplicates the first is kept.
pub fn dedup_captions(raw: &[String]) -> Vec<String> {
    let items: Vec<(usize, &str, String)> = raw
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.trim(), normalize(c)))
        .filter(|(_, _, n)| !n.is_empty())
        .collect();
    // longest first, so every absorbing caption is decided before what it absorbs
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].2.len().cmp(&items[a].2.len()).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for k in order {
        let norm = &items[k].2;
        if !kept.iter().any(|&j| items[j].2.contains(norm.as_str())) {
            kept.push(k);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|k| items[k].1.to_string()).collect()
}

/// One caption-cache record (captions are stored before deduplication).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub captioner_id: String,
    pub image_id: String,
    pub mode: CaptionMode,
    pub captions: Vec<String>,
    pub timestamp: String,
}

type CaptionKey = (String, String, CaptionMode);

pub struct CaptionCache {
    entries: RwLock<HashMap<CaptionKey, Vec<String>>>,
    log: Option<JsonlLog<CaptionRecord>>,
}

impl CaptionCache {
    pub fn open(path: &Path) -> Result<Self, CaptionError> {
        let (log, records) = JsonlLog::<CaptionRecord>::open(path).map_err(|source| CaptionError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        let entries = records
            .into_iter()
            .map(|r| ((r.captioner_id, r.image_id, r.mode), r.captions))
            .collect();
        Ok(CaptionCache {
            entries: RwLock::new(entries),
            log: Some(log),
        })
    }

    pub fn in_memory() -> Self {
        CaptionCache {
            entries: RwLock::new(HashMap::new()),
            log: None,
        }
    }

    pub fn get(&self, captioner_id: &str, image_id: &str, mode: CaptionMode) -> Option<Vec<String>> {
        self.entries
            .read()
            .unwrap()
            .get(&(captioner_id.to_string(), image_id.to_string(), mode))
            .cloned()
    }

    pub fn insert(
        &self,
        captioner_id: &str,
        image_id: &str,
        mode: CaptionMode,
        raw: &[String],
    ) -> Result<(), CaptionError> {
        if let Some(log) = &self.log {
            let record = CaptionRecord {
                captioner_id: captioner_id.to_string(),
                image_id: image_id.to_string(),
                mode,
                captions: raw.to_vec(),
                timestamp: timestamp(),
            };
            log.append(&record).map_err(|source| CaptionError::Cache {
                path: log.path().display().to_string(),
                source,
            })?;
        }
        self.entries.write().unwrap().insert(
            (captioner_id.to_string(), image_id.to_string(), mode),
            raw.to_vec(),
        );
        Ok(())
    }
}

/// Captions one image file. Greedy yields one caption; beam yields up to
/// ten raw captions, deduplicated.
pub fn generate_captions(
    captioner: &dyn Captioner,
    image_id: &str,
    image_dir: &Path,
    mode: CaptionMode,
) -> Result<CaptionSet, CaptionError> {
    generate_captions_cached(captioner, image_id, image_dir, mode, &CaptionCache::in_memory())
}

pub fn generate_captions_cached(
    captioner: &dyn Captioner,
    image_id: &str,
    image_dir: &Path,
    mode: CaptionMode,
    cache: &CaptionCache,
) -> Result<CaptionSet, CaptionError> {
    if let Some(raw) = cache.get(captioner.id(), image_id, mode) {
        return CaptionSet::from_raw(image_id, mode, raw, captioner.id());
    }
    let bytes = fs::read(image_dir.join(image_id)).map_err(|e| CaptionError::ImageUnreadable {
        id: image_id.to_string(),
        reason: e.to_string(),
    })?;
    let raw = captioner.caption(&bytes, mode)?;
    let set = CaptionSet::from_raw(image_id, mode, raw, captioner.id())?;
    cache.insert(captioner.id(), image_id, mode, &set.raw)?;
    Ok(set)
}

/// Best caption similarity per candidate: `max_k sim(phrase, c_i^k)`.
/// `caption_embs[j]` holds the caption embeddings of candidate `j`.
pub fn caption_scores(
    phrase: &Embedding,
    caption_embs: &[Vec<Embedding>],
    metric: Metric,
) -> Result<Vec<f64>, ScoringError> {
    caption_embs
        .iter()
        .map(|caps| {
            let mut best = f64::NEG_INFINITY;
            for c in caps {
                best = best.max(similarity(phrase, c, metric)?);
            }
            Ok(best)
        })
        .collect()
}

/// Ranks candidates by their most similar caption. `phrase_text` may be the
/// original or an enhanced phrase.
pub fn rank_by_captions(
    sample: &Sample,
    phrase_text: &str,
    caption_sets: &HashMap<String, CaptionSet>,
    text_embedder: &dyn EmbeddingBackend,
    metric: Metric,
) -> Result<Ranking, CaptionError> {
    let sets = sample
        .candidates
        .iter()
        .map(|c| {
            caption_sets
                .get(c)
                .filter(|s| !s.captions.is_empty())
                .ok_or_else(|| CaptionError::MissingCaptions(c.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let phrase = embed_texts(text_embedder, &[phrase_text.to_string()])?.remove(0);
    let caption_embs = sets
        .iter()
        .map(|s| embed_texts(text_embedder, &s.captions))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = caption_scores(&phrase, &caption_embs, metric)?;
    Ok(Ranking::from_scores(sample.sample_id, &sample.candidates, &scores))
}

const SUBJECTS: [&str; 12] = [
    "dog", "boat", "tree", "building", "flower", "man", "woman", "car", "bird", "fish",
    "mountain", "plate",
];
const ADJECTIVES: [&str; 8] = ["small", "large", "red", "old", "white", "wooden", "blue", "tall"];
const SETTINGS: [&str; 8] = [
    "in the water", "on a table", "in a field", "near a harbor", "on the street",
    "in the snow", "at night", "in a garden",
];

/// Deterministic offline captioner keyed on the image bytes.
///
/// Beam output deliberately contains duplicates and prefixes of longer
/// captions so deduplication has something to do.
#[derive(Debug, Clone)]
pub struct MockCaptioner {
    seed: u64,
    id: String,
}

impl MockCaptioner {
    pub fn new(seed: u64) -> Self {
        MockCaptioner {
            seed,
            id: format!("mock-captioner-s{seed}"),
        }
    }

    fn caption_from(&self, d: &[u8]) -> String {
        format!(
            "a {} {} {}",
            ADJECTIVES[d[0] as usize % ADJECTIVES.len()],
            SUBJECTS[d[1] as usize % SUBJECTS.len()],
            SETTINGS[d[2] as usize % SETTINGS.len()]
        )
    }
}

impl Captioner for MockCaptioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn caption(&self, image: &[u8], mode: CaptionMode) -> Result<Vec<String>, CaptionError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(image);
        let d: [u8; 32] = h.finalize().into();
        match mode {
            CaptionMode::Greedy => Ok(vec![self.caption_from(&d)]),
            CaptionMode::Beam => Ok((0..MAX_BEAM_CAPTIONS)
                .map(|k| {
                    let c = self.caption_from(&d[(k * 3) % 30..]);
                    match d[31 - k] % 4 {
                        // prefix of the caption, absorbed by dedup
                        0 => c.split(' ').take(3).collect::<Vec<_>>().join(" "),
                        _ => c,
                    }
                })
                .collect()),
        }
    }
}

/// Adapter for a captioner served over HTTP: `POST {base_url}/caption` with
/// `{"image_b64": ..., "mode": "greedy"|"beam"}` answering `{"captions": [...]}`.
pub struct HttpCaptioner {
    base_url: String,
    id: String,
    client: reqwest::blocking::Client,
}

impl HttpCaptioner {
    pub fn new(base_url: impl Into<String>, id: impl Into<String>) -> Result<Self, CaptionError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| CaptionError::BackendUnavailable(e.to_string()))?;
        Ok(HttpCaptioner {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            id: id.into(),
            client,
        })
    }
}

impl Captioner for HttpCaptioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn caption(&self, image: &[u8], mode: CaptionMode) -> Result<Vec<String>, CaptionError> {
        use base64::Engine;
        #[derive(Deserialize)]
        struct Response {
            captions: Vec<String>,
        }
        let unavailable = |e: reqwest::Error| CaptionError::BackendUnavailable(e.to_string());
        let body = serde_json::json!({
            "image_b64": base64::engine::general_purpose::STANDARD.encode(image),
            "mode": mode.as_str(),
        });
        let resp = self
            .client
            .post(format!("{}/caption", self.base_url))
            .json(&body)
            .send()
            .map_err(unavailable)?
            .error_for_status()
            .map_err(unavailable)?;
        Ok(resp.json::<Response>().map_err(unavailable)?.captions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CANDIDATES_PER_SAMPLE;
    use crate::embeddings::MockBackend;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    /// Direct reading of the postcondition: keep i unless some other
    /// surviving caption absorbs it. Evaluated against the longest-first
    /// closure, which is what "survives" resolves to.
    fn oracle(raw: &[String]) -> Vec<String> {
        let norm: Vec<String> = raw.iter().map(|c| c.trim().to_lowercase()).collect();
        let keep: Vec<bool> = (0..raw.len())
            .map(|i| {
                !norm[i].is_empty()
                    && !(0..raw.len()).any(|j| {
                        j != i
                            && !norm[j].is_empty()
                            && norm[j].contains(norm[i].as_str())
                            && (norm[j].len() > norm[i].len() || j < i)
                    })
            })
            .collect();
        raw.iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(c, _)| c.trim().to_string())
            .collect()
    }

    #[test]
    fn dedup_hand_cases() {
        assert_eq!(
            dedup_captions(&s(&["a dog", "a dog", "a dog running"])),
            s(&["a dog running"])
        );
        assert_eq!(dedup_captions(&s(&["x"])), s(&["x"]));
        assert_eq!(
            dedup_captions(&s(&["cat on mat", "dog"])),
            s(&["cat on mat", "dog"])
        );
        assert_eq!(
            dedup_captions(&s(&["A Dog ", "a dog", "", "  "])),
            s(&["A Dog"])
        );
        assert_eq!(dedup_captions(&s(&["b", "ab", "abc", "c"])), s(&["abc"]));
    }

    #[test]
    fn greedy_set_has_one_caption() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.jpg"), b"pixels").unwrap();
        let set = generate_captions(&MockCaptioner::new(0), "a.jpg", dir.path(), CaptionMode::Greedy).unwrap();
        assert_eq!(set.captions.len(), 1);
        assert_eq!(set.mode, CaptionMode::Greedy);
    }

    struct FixedCaptioner(Vec<String>);

    impl Captioner for FixedCaptioner {
        fn id(&self) -> &str {
            "fixed"
        }

        fn caption(&self, _: &[u8], _: CaptionMode) -> Result<Vec<String>, CaptionError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn beam_dedup_drops_substrings() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.jpg"), b"pixels").unwrap();
        let raw = s(&[
            "a small boat",
            "a small boat in the water",
            "a boat",
            "two oars",
            "a small boat in the water with two oars",
            "a river",
            "a river bank at dawn",
            "people rowing",
            "a dory",
            "a wooden dory on the sand",
        ]);
        let expected = oracle(&raw);
        let set = generate_captions(&FixedCaptioner(raw.clone()), "a.jpg", dir.path(), CaptionMode::Beam).unwrap();
        assert_eq!(set.raw, raw);
        assert_eq!(set.captions, expected);
        assert!(set.captions.len() <= 7);
    }

    #[test]
    fn unreadable_image() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_captions(&MockCaptioner::new(0), "none.jpg", dir.path(), CaptionMode::Greedy).unwrap_err();
        assert!(matches!(err, CaptionError::ImageUnreadable { id, .. } if id == "none.jpg"));
    }

    #[test]
    fn cache_replays_without_captioner() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.jpg"), b"pixels").unwrap();
        let path = dir.path().join("captions.jsonl");
        let cap = MockCaptioner::new(2);
        let first = {
            let cache = CaptionCache::open(&path).unwrap();
            generate_captions_cached(&cap, "a.jpg", dir.path(), CaptionMode::Beam, &cache).unwrap()
        };
        fs::remove_file(dir.path().join("a.jpg")).unwrap();
        let cache = CaptionCache::open(&path).unwrap();
        let again = generate_captions_cached(&cap, "a.jpg", dir.path(), CaptionMode::Beam, &cache).unwrap();
        assert_eq!(first, again);
    }

    fn sample() -> Sample {
        let cands = (0..CANDIDATES_PER_SAMPLE).map(|k| format!("c{k}.jpg")).collect();
        Sample::new(0, "rowing", "rowing dory", cands, None).unwrap()
    }

    #[test]
    fn exact_caption_match_wins() {
        let sample = sample();
        let mut sets = HashMap::new();
        for (k, c) in sample.candidates.iter().enumerate() {
            let text = if k == 3 { "rowing dory".to_string() } else { format!("caption number {k}") };
            sets.insert(c.clone(), CaptionSet::from_raw(c, CaptionMode::Greedy, vec![text], "t").unwrap());
        }
        let r = rank_by_captions(&sample, "rowing dory", &sets, &MockBackend::new(0, 32), Metric::Cosine).unwrap();
        assert_eq!(r.top(), Some("c3.jpg"));
    }

    #[test]
    fn missing_caption_set_is_an_error() {
        let sample = sample();
        let err = rank_by_captions(&sample, "x", &HashMap::new(), &MockBackend::new(0, 8), Metric::Cosine).unwrap_err();
        assert!(matches!(err, CaptionError::MissingCaptions(c) if c == "c0.jpg"));
    }

    #[test]
    fn beam_scores_match_grid_max() {
        let b = MockBackend::new(5, 16);
        let phrase = Embedding::new(b.space_id(), b.embed_text("p").unwrap()).unwrap();
        let grid: Vec<Vec<Embedding>> = (0..10)
            .map(|j| {
                (0..10)
                    .map(|k| Embedding::new(b.space_id(), b.embed_text(&format!("{j}-{k}")).unwrap()).unwrap())
                    .collect()
            })
            .collect();
        let scores = caption_scores(&phrase, &grid, Metric::Manhattan).unwrap();
        let mut best = (0, f64::NEG_INFINITY);
        for (j, caps) in grid.iter().enumerate() {
            let mut m = f64::NEG_INFINITY;
            for c in caps {
                let d: f64 = phrase
                    .values()
                    .iter()
                    .zip(c.values())
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
                    .sum();
                m = m.max(-d);
            }
            assert!((scores[j] - m).abs() < 1e-12);
            if m > best.1 {
                best = (j, m);
            }
        }
        let sample = sample();
        let r = Ranking::from_scores(0, &sample.candidates, &scores);
        assert_eq!(r.top(), Some(sample.candidates[best.0].as_str()));
    }

    #[test]
    fn singleton_sets_reduce_to_plain_vl_ranking() {
        let b = MockBackend::new(9, 16);
        let sample = sample();
        for trial in 0..50 {
            let phrase = Embedding::new(b.space_id(), b.embed_text(&format!("p{trial}")).unwrap()).unwrap();
            let caps: Vec<Embedding> = (0..10)
                .map(|k| Embedding::new(b.space_id(), b.embed_text(&format!("{trial}/{k}")).unwrap()).unwrap())
                .collect();
            let grid: Vec<Vec<Embedding>> = caps.iter().map(|c| vec![c.clone()]).collect();
            let by_caps = Ranking::from_scores(0, &sample.candidates, &caption_scores(&phrase, &grid, Metric::Cosine).unwrap());
            let images: HashMap<String, Embedding> = sample.candidates.iter().cloned().zip(caps).collect();
            let vl = crate::scoring::rank_vl(&sample, &phrase, &images, Metric::Cosine, None).unwrap();
            assert_eq!(by_caps, vl);
        }
    }

    fn caption_list() -> impl Strategy<Value = Vec<String>> {
        let word = prop::sample::select(vec!["a", "dog", "boat", "the", "red", "in", "water", "A", "Dog"]);
        let caption = prop::collection::vec(word, 0..5).prop_map(|w| w.join(" "));
        prop::collection::vec(caption, 0..12)
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent_and_substring_free(raw in caption_list()) {
            let once = dedup_captions(&raw);
            prop_assert_eq!(dedup_captions(&once), once.clone());
            let norm: Vec<String> = once.iter().map(|c| c.to_lowercase()).collect();
            for i in 0..norm.len() {
                prop_assert!(!norm[i].is_empty());
                for j in 0..norm.len() {
                    if i != j {
                        prop_assert!(!norm[j].contains(norm[i].as_str()), "{:?} inside {:?}", norm[i], norm[j]);
                    }
                }
            }
            prop_assert_eq!(once, oracle(&raw));
        }
    }
}
