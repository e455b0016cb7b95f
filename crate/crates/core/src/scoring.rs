//! Similarity metrics, the per-image penalty, and penalty-adjusted ranking.
//!
//! All scores are kept on a higher-is-better scale: cosine is used as is,
//! distances are negated where they enter.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::embeddings::Embedding;
use crate::exec::Exec;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cosine similarity is undefined for an all-zero vector")]
    ZeroVector,
    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("penalty table has no entry for candidate `{0}`")]
    PenaltyMissingCandidate(String),
    #[error("penalty needs at least one phrase")]
    EmptyPhraseSet,
    #[error("penalty weight must be finite and non-negative, got {0}")]
    InvalidAlpha(f64),
    #[error("embeddings come from different spaces: `{0}` vs `{1}`")]
    SpaceMismatch(String, String),
    #[error("expected {expected} scores, got {actual}")]
    ScoreCount { expected: usize, actual: usize },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
    Manhattan,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cosine, Metric::Euclidean, Metric::Manhattan];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
        }
    }

    /// Cosine is a similarity; the other two are distances negated on entry.
    pub fn is_distance(self) -> bool {
        !matches!(self, Metric::Cosine)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = ScoringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            "manhattan" => Ok(Metric::Manhattan),
            _ => Err(ScoringError::UnknownMetric(s.to_string())),
        }
    }
}

/// Metric over raw slices; the canonical higher-is-better value.
pub fn similarity_raw(u: &[f32], v: &[f32], metric: Metric) -> Result<f64, ScoringError> {
    if u.len() != v.len() {
        return Err(ScoringError::DimMismatch(u.len(), v.len()));
    }
    let pairs = u.iter().zip(v).map(|(&a, &b)| (f64::from(a), f64::from(b)));
    match metric {
        Metric::Cosine => {
            let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
            for (a, b) in pairs {
                dot += a * b;
                nu += a * a;
                nv += b * b;
            }
            if nu == 0.0 || nv == 0.0 {
                return Err(ScoringError::ZeroVector);
            }
            Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
        }
        Metric::Euclidean => Ok(-pairs.map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()),
        Metric::Manhattan => Ok(-pairs.map(|(a, b)| (a - b).abs()).sum::<f64>()),
    }
}

/// Canonical similarity between two embeddings of one space.
pub fn similarity(u: &Embedding, v: &Embedding, metric: Metric) -> Result<f64, ScoringError> {
    similarity_raw(u.values(), v.values(), metric)
}

/// Per-image penalty weights subtracted from similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTable {
    pub space_id: String,
    pub alpha: f64,
    pub values: BTreeMap<String, f64>,
}

impl PenaltyTable {
    pub fn get(&self, image_id: &str) -> Option<f64> {
        self.values.get(image_id).copied()
    }
}

/// `alpha` times the mean of one image's similarities to every phrase.
pub fn penalty_value(similarities: &[f64], alpha: f64) -> f64 {
    if similarities.is_empty() {
        return 0.0;
    }
    alpha * similarities.iter().sum::<f64>() / similarities.len() as f64
}

/// `p(i) = alpha * mean_t cos(t, i)` over every supplied phrase embedding.
///
/// Cosine is used regardless of the ranking metric so the penalty stays on
/// the bounded similarity scale.
pub fn compute_penalty<'a, I>(
    phrase_embs: &[Embedding],
    image_embs: I,
    alpha: f64,
) -> Result<PenaltyTable, ScoringError>
where
    I: IntoIterator<Item = (&'a str, &'a Embedding)>,
{
    compute_penalty_with(Exec::default(), phrase_embs, image_embs, alpha)
}

pub fn compute_penalty_with<'a, I>(
    exec: Exec,
    phrase_embs: &[Embedding],
    image_embs: I,
    alpha: f64,
) -> Result<PenaltyTable, ScoringError>
where
    I: IntoIterator<Item = (&'a str, &'a Embedding)>,
{
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(ScoringError::InvalidAlpha(alpha));
    }
    let first = phrase_embs.first().ok_or(ScoringError::EmptyPhraseSet)?;
    let space_id = first.space_id().to_string();
    if let Some(bad) = phrase_embs.iter().find(|e| e.space_id() != space_id) {
        return Err(ScoringError::SpaceMismatch(space_id, bad.space_id().into()));
    }
    let images: Vec<(&str, &Embedding)> = image_embs.into_iter().collect();
    if let Some((_, bad)) = images.iter().find(|(_, e)| e.space_id() != space_id) {
        return Err(ScoringError::SpaceMismatch(space_id, bad.space_id().into()));
    }
    let penalties = exec.try_map(&images, |(_, img)| {
        let sims = phrase_embs
            .iter()
            .map(|t| similarity(t, img, Metric::Cosine))
            .collect::<Result<Vec<_>, _>>()?;
        Ok::<f64, ScoringError>(penalty_value(&sims, alpha))
    })?;
    let values = images
        .iter()
        .zip(penalties)
        .map(|((id, _), p)| (id.to_string(), p))
        .collect();
    Ok(PenaltyTable {
        space_id,
        alpha,
        values,
    })
}

/// A sample's candidates ordered by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub sample_id: usize,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
}

impl Ranking {
    /// Sorts candidates by score, descending; ties keep candidate order.
    pub fn from_scores(sample_id: usize, candidates: &[String], scores: &[f64]) -> Self {
        assert_eq!(candidates.len(), scores.len(), "one score per candidate");
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        Ranking {
            sample_id,
            candidates: order.iter().map(|&k| candidates[k].clone()).collect(),
            scores: order.iter().map(|&k| scores[k]).collect(),
        }
    }

    /// A ranking known only by its order, e.g. read back from a prediction
    /// file. Scores are synthesized as `n, n-1, ..., 1`.
    pub fn from_order(sample_id: usize, order: Vec<String>) -> Self {
        let n = order.len();
        Ranking {
            sample_id,
            scores: (0..n).map(|k| (n - k) as f64).collect(),
            candidates: order,
        }
    }

    pub fn top(&self) -> Option<&str> {
        self.candidates.first().map(String::as_str)
    }

    /// 1-based position of `id`.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c == id).map(|p| p + 1)
    }
}

/// Aligned-to-candidate scores for one sample.
pub fn score_candidates(
    sample: &Sample,
    phrase: &Embedding,
    images: &HashMap<String, Embedding>,
    metric: Metric,
    penalty: Option<&PenaltyTable>,
) -> Result<Vec<f64>, ScoringError> {
    sample
        .candidates
        .iter()
        .map(|c| {
            let img = images
                .get(c)
                .ok_or_else(|| ScoringError::MissingEmbedding(c.clone()))?;
            if img.space_id() != phrase.space_id() {
                return Err(ScoringError::SpaceMismatch(
                    phrase.space_id().into(),
                    img.space_id().into(),
                ));
            }
            let sim = similarity(phrase, img, metric)?;
            let p = match penalty {
                Some(table) => table
                    .get(c)
                    .ok_or_else(|| ScoringError::PenaltyMissingCandidate(c.clone()))?,
                None => 0.0,
            };
            Ok(sim - p)
        })
        .collect()
}

/// `score(t, i) = sim(t, i) - p(i)` (or plain similarity without a
/// penalty), ranked descending. Works for original and enhanced phrases.
pub fn rank_vl(
    sample: &Sample,
    phrase: &Embedding,
    images: &HashMap<String, Embedding>,
    metric: Metric,
    penalty: Option<&PenaltyTable>,
) -> Result<Ranking, ScoringError> {
    let scores = score_candidates(sample, phrase, images, metric, penalty)?;
    Ok(Ranking::from_scores(sample.sample_id, &sample.candidates, &scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CANDIDATES_PER_SAMPLE;
    use crate::embeddings::{EmbeddingBackend, MockBackend};
    use proptest::prelude::*;

    fn e(v: &[f32]) -> Embedding {
        Embedding::new("s", v.to_vec()).unwrap()
    }

    fn sample() -> Sample {
        let cands = (0..CANDIDATES_PER_SAMPLE).map(|k| format!("i{k}")).collect();
        Sample::new(0, "w", "w x", cands, None).unwrap()
    }

    #[test]
    fn metric_hand_cases() {
        assert_eq!(similarity(&e(&[1.0, 0.0]), &e(&[1.0, 0.0]), Metric::Cosine), Ok(1.0));
        assert_eq!(similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0]), Metric::Cosine), Ok(0.0));
        assert_eq!(
            similarity(&e(&[1.0, 2.0]), &e(&[4.0, 6.0]), Metric::Manhattan),
            Ok(-7.0)
        );
        assert_eq!(
            similarity(&e(&[1.0, 2.0]), &e(&[4.0, 6.0]), Metric::Euclidean),
            Ok(-5.0)
        );
        assert_eq!(
            similarity(&e(&[1.0, 2.0]), &e(&[1.0, 2.0]), Metric::Euclidean),
            Ok(0.0)
        );
    }

    #[test]
    fn metric_errors() {
        assert_eq!(
            similarity(&e(&[1.0, 0.0]), &e(&[1.0, 0.0, 0.0]), Metric::Cosine),
            Err(ScoringError::DimMismatch(2, 3))
        );
        assert_eq!(
            similarity(&e(&[0.0, 0.0]), &e(&[1.0, 0.0]), Metric::Cosine),
            Err(ScoringError::ZeroVector)
        );
        assert!(similarity(&e(&[0.0, 0.0]), &e(&[1.0, 0.0]), Metric::Manhattan).is_ok());
        assert_eq!("Cosine".parse::<Metric>(), Ok(Metric::Cosine));
        assert!("hamming".parse::<Metric>().is_err());
    }

    #[test]
    fn penalty_is_alpha_times_mean_cosine() {
        // image i = (1, 0); phrases chosen with cosines 0.9 and 0.7
        let t1 = e(&[0.9, (1.0f32 - 0.81).sqrt()]);
        let t2 = e(&[0.7, (1.0f32 - 0.49).sqrt()]);
        let img = e(&[1.0, 0.0]);
        let table = compute_penalty(&[t1.clone(), t2.clone()], [("i", &img)], 1.0).unwrap();
        assert!((table.get("i").unwrap() - 0.8).abs() < 1e-7);
        let zero = compute_penalty(&[t1, t2], [("i", &img)], 0.0).unwrap();
        assert_eq!(zero.get("i"), Some(0.0));
    }

    #[test]
    fn penalty_errors() {
        let img = e(&[1.0, 0.0]);
        assert_eq!(
            compute_penalty(&[], [("i", &img)], 1.0),
            Err(ScoringError::EmptyPhraseSet)
        );
        assert_eq!(
            compute_penalty(&[img.clone()], [("i", &img)], -1.0),
            Err(ScoringError::InvalidAlpha(-1.0))
        );
    }

    #[test]
    fn penalty_flips_ranking() {
        // sims [0.9, 0.8], penalties [0.5, 0.1] -> adjusted [0.4, 0.7]
        let s = sample();
        let phrase = e(&[1.0, 0.0]);
        let mut images = HashMap::new();
        let mut values = BTreeMap::new();
        for (k, c) in s.candidates.iter().enumerate() {
            let cos: f32 = match k {
                0 => 0.9,
                1 => 0.8,
                _ => -0.5,
            };
            images.insert(c.clone(), e(&[cos, (1.0 - cos * cos).sqrt()]));
            values.insert(c.clone(), if k == 0 { 0.5 } else { 0.1 });
        }
        let plain = rank_vl(&s, &phrase, &images, Metric::Cosine, None).unwrap();
        assert_eq!(plain.top(), Some("i0"));
        let table = PenaltyTable {
            space_id: "s".into(),
            alpha: 1.0,
            values,
        };
        let adjusted = rank_vl(&s, &phrase, &images, Metric::Cosine, Some(&table)).unwrap();
        assert_eq!(adjusted.top(), Some("i1"));
        assert!((adjusted.scores[0] - 0.7).abs() < 1e-6);
        assert!((adjusted.scores[1] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn missing_inputs_are_reported() {
        let s = sample();
        let phrase = e(&[1.0, 0.0]);
        let images: HashMap<String, Embedding> = HashMap::new();
        assert_eq!(
            rank_vl(&s, &phrase, &images, Metric::Cosine, None),
            Err(ScoringError::MissingEmbedding("i0".into()))
        );
        let images: HashMap<String, Embedding> =
            s.candidates.iter().map(|c| (c.clone(), e(&[0.0, 1.0]))).collect();
        let empty = PenaltyTable {
            space_id: "s".into(),
            alpha: 1.0,
            values: BTreeMap::new(),
        };
        assert_eq!(
            rank_vl(&s, &phrase, &images, Metric::Cosine, Some(&empty)),
            Err(ScoringError::PenaltyMissingCandidate("i0".into()))
        );
    }

    #[test]
    fn ties_keep_candidate_order() {
        let cands: Vec<String> = (0..4).map(|k| format!("c{k}")).collect();
        let r = Ranking::from_scores(3, &cands, &[0.1, 0.5, 0.5, 0.1]);
        assert_eq!(r.candidates, ["c1", "c2", "c0", "c3"]);
        assert_eq!(r.rank_of("c0"), Some(3));
        assert_eq!(r.rank_of("zz"), None);
    }

    fn mock_vectors(seed: u64, n: usize) -> Vec<Embedding> {
        let b = MockBackend::new(seed, 12);
        (0..n)
            .map(|k| Embedding::new(b.space_id(), b.embed_text(&format!("v{k}")).unwrap()).unwrap())
            .collect()
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_cosine_ranking(seed in 0u64..500, scale in 0.01f32..100.0) {
            let s = sample();
            let vecs = mock_vectors(seed, 11);
            let phrase = vecs[10].clone();
            let images: HashMap<String, Embedding> =
                s.candidates.iter().cloned().zip(vecs[..10].iter().cloned()).collect();
            let scaled_phrase = Embedding::new(
                phrase.space_id(),
                phrase.values().iter().map(|v| v * scale).collect(),
            ).unwrap();
            let a = rank_vl(&s, &phrase, &images, Metric::Cosine, None).unwrap();
            let b = rank_vl(&s, &scaled_phrase, &images, Metric::Cosine, None).unwrap();
            prop_assert_eq!(a.candidates, b.candidates);
        }

        #[test]
        fn euclidean_matches_squared_euclidean_order(seed in 0u64..500) {
            let s = sample();
            let vecs = mock_vectors(seed, 11);
            let images: HashMap<String, Embedding> =
                s.candidates.iter().cloned().zip(vecs[..10].iter().cloned()).collect();
            let a = rank_vl(&s, &vecs[10], &images, Metric::Euclidean, None).unwrap();
            let squared: Vec<f64> = s.candidates.iter().map(|c| {
                let d = similarity(&vecs[10], &images[c], Metric::Euclidean).unwrap();
                -(d * d)
            }).collect();
            let b = Ranking::from_scores(0, &s.candidates, &squared);
            prop_assert_eq!(a.candidates, b.candidates);
        }

        #[test]
        fn penalty_shift_is_linear(sims in prop::collection::vec(-1.0f64..1.0, 1..40), c in -0.5f64..0.5, alpha in 0.0f64..3.0) {
            let p = penalty_value(&sims, alpha);
            let shifted: Vec<f64> = sims.iter().map(|s| s + c).collect();
            let p2 = penalty_value(&shifted, alpha);
            prop_assert!((p2 - p - alpha * c).abs() < 1e-9);
        }
    }
}
