//! Candidate selection as multiple-choice question answering over image
//! captions, with optional two-stage chain-of-thought prompting.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::captions::{CaptionMode, CaptionSet};
use crate::dataset::{Dataset, Sample, CANDIDATES_PER_SAMPLE};
use crate::exec::Exec;
use crate::jsonl::{timestamp, JsonlLog};
use crate::llm::{CompletionBackend, LlmError, LlmParams, RetryPolicy};
use crate::scoring::Ranking;

pub const LETTERS: [char; CANDIDATES_PER_SAMPLE] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];
pub const THINK_SUFFIX: &str = "A: Let\u{2019}s think step by step. ";
pub const NO_COT_SUFFIX: &str = "A: ";
pub const COT_FOLLOWUP: &str = "Therefore, among A through J, the answer is ";
pub const BEAM_SEPARATOR: &str = ", ";

#[derive(Debug, Error)]
pub enum QaError {
    #[error("candidate `{candidate}` has {actual} captions, {mode} prompts need {expected}")]
    CaptionCountMismatch {
        candidate: String,
        mode: QaMode,
        expected: &'static str,
        actual: usize,
    },
    #[error("no captions for candidate `{0}`")]
    MissingCaptions(String),
    #[error("expected {CANDIDATES_PER_SAMPLE} answer choices, got {0}")]
    ChoiceCount(usize),
    #[error("`{0}` is not a runnable QA mode")]
    NotRunnable(QaMode),
    #[error("unknown QA mode `{0}`")]
    UnknownMode(String),
    #[error("LLM backend unavailable: {0}")]
    BackendUnavailable(#[from] LlmError),
    #[error("QA cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaMode {
    ThinkGreedy,
    ThinkBeam,
    NoCotGreedy,
    NoCotBeam,
    CotFollowup,
}

impl QaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QaMode::ThinkGreedy => "think_greedy",
            QaMode::ThinkBeam => "think_beam",
            QaMode::NoCotGreedy => "no_cot_greedy",
            QaMode::NoCotBeam => "no_cot_beam",
            QaMode::CotFollowup => "cot_followup",
        }
    }

    pub fn caption_mode(self) -> Option<CaptionMode> {
        match self {
            QaMode::ThinkGreedy | QaMode::NoCotGreedy => Some(CaptionMode::Greedy),
            QaMode::ThinkBeam | QaMode::NoCotBeam => Some(CaptionMode::Beam),
            QaMode::CotFollowup => None,
        }
    }

    pub fn is_think(self) -> bool {
        matches!(self, QaMode::ThinkGreedy | QaMode::ThinkBeam)
    }

    /// The two-stage chain for a caption mode.
    pub fn think(base: CaptionMode) -> Self {
        match base {
            CaptionMode::Greedy => QaMode::ThinkGreedy,
            CaptionMode::Beam => QaMode::ThinkBeam,
        }
    }

    pub fn no_cot(base: CaptionMode) -> Self {
        match base {
            CaptionMode::Greedy => QaMode::NoCotGreedy,
            CaptionMode::Beam => QaMode::NoCotBeam,
        }
    }
}

impl fmt::Display for QaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QaMode {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            QaMode::ThinkGreedy,
            QaMode::ThinkBeam,
            QaMode::NoCotGreedy,
            QaMode::NoCotBeam,
            QaMode::CotFollowup,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| QaError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPrompt {
    pub mode: QaMode,
    pub phrase: String,
    /// Choice texts for (A)..(J), in candidate order.
    pub choices: Vec<String>,
    pub rendered: String,
}

/// Renders a question prompt from ready-made choice texts.
pub fn render_qa_prompt(phrase: &str, choices: Vec<String>, mode: QaMode) -> Result<QaPrompt, QaError> {
    let base = mode.caption_mode().ok_or(QaError::NotRunnable(mode))?;
    if choices.len() != CANDIDATES_PER_SAMPLE {
        return Err(QaError::ChoiceCount(choices.len()));
    }
    let subject = match base {
        CaptionMode::Greedy => "caption",
        CaptionMode::Beam => "group of captions",
    };
    let listed: Vec<String> = LETTERS
        .iter()
        .zip(&choices)
        .map(|(l, c)| format!("({l}) {c}"))
        .collect();
    let suffix = if mode.is_think() { THINK_SUFFIX } else { NO_COT_SUFFIX };
    let rendered = format!(
        "Q: What is the most appropriate {subject} for the {phrase}?\nAnswer choices: {}\n{suffix}",
        listed.join(" ")
    );
    Ok(QaPrompt {
        mode,
        phrase: phrase.to_string(),
        choices,
        rendered,
    })
}

/// Greedy modes take the single caption of each candidate; beam modes join
/// each candidate's deduplicated captions with `", "`.
pub fn build_qa_prompt(
    phrase: &str,
    candidates: &[String],
    caption_sets: &HashMap<String, CaptionSet>,
    mode: QaMode,
) -> Result<QaPrompt, QaError> {
    let base = mode.caption_mode().ok_or(QaError::NotRunnable(mode))?;
    let mut choices = Vec::with_capacity(candidates.len());
    for c in candidates {
        let set = caption_sets
            .get(c)
            .ok_or_else(|| QaError::MissingCaptions(c.clone()))?;
        let n = set.captions.len();
        match base {
            CaptionMode::Greedy if n != 1 => {
                return Err(QaError::CaptionCountMismatch {
                    candidate: c.clone(),
                    mode,
                    expected: "exactly 1",
                    actual: n,
                })
            }
            CaptionMode::Beam if n == 0 => {
                return Err(QaError::CaptionCountMismatch {
                    candidate: c.clone(),
                    mode,
                    expected: "at least 1",
                    actual: 0,
                })
            }
            _ => {}
        }
        choices.push(set.captions.join(BEAM_SEPARATOR));
    }
    render_qa_prompt(phrase, choices, mode)
}

/// Stage-2 prompt: the think prompt, the stage-1 response verbatim, then
/// the answer-extraction cue on its own line.
pub fn build_cot_followup(think: &QaPrompt, response: &str) -> QaPrompt {
    QaPrompt {
        mode: QaMode::CotFollowup,
        phrase: think.phrase.clone(),
        choices: think.choices.clone(),
        rendered: format!("{}{response}\n{COT_FOLLOWUP}", think.rendered),
    }
}

fn is_letter(c: char) -> bool {
    ('A'..='J').contains(&c)
}

/// Finds the chosen letter: first any `(X)` with X in A-J; failing that, a
/// standalone A-J after "answer is" (any case), past spaces, colons,
/// quotes and asterisks. Anything else abstains.
pub fn parse_answer_letter(text: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    if let Some(w) = chars
        .windows(3)
        .find(|w| w[0] == '(' && is_letter(w[1]) && w[2] == ')')
    {
        return Some(w[1]);
    }
    let cue: Vec<char> = "answer is".chars().collect();
    let mut i = 0;
    while i + cue.len() <= chars.len() {
        let hit = chars[i..i + cue.len()]
            .iter()
            .zip(&cue)
            .all(|(a, b)| a.to_lowercase().eq(b.to_lowercase()));
        if hit {
            let mut k = i + cue.len();
            while k < chars.len() && is_answer_filler(chars[k]) {
                k += 1;
            }
            let delimited_before = k > i + cue.len();
            let delimited_after = chars.get(k + 1).is_none_or(|c| !c.is_alphanumeric());
            if delimited_before && chars.get(k).is_some_and(|&c| is_letter(c)) && delimited_after {
                return Some(chars[k]);
            }
        }
        i += 1;
    }
    None
}

fn is_answer_filler(c: char) -> bool {
    c.is_whitespace() || matches!(c, ':' | '"' | '\'' | '*' | '\u{201c}' | '\u{201d}' | '\u{2018}' | '\u{2019}')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaResult {
    pub sample_id: usize,
    /// Entry mode of the run (a think or no-CoT mode).
    pub mode: QaMode,
    /// Stage-1 response of a CoT run.
    pub reasoning: Option<String>,
    pub answer_letter: Option<char>,
    /// Response the letter was parsed from.
    pub raw_response: String,
    pub prompts: Vec<String>,
    pub responses: Vec<String>,
}

impl QaResult {
    pub fn answer<'a>(&self, candidates: &'a [String]) -> Option<&'a str> {
        let k = LETTERS.iter().position(|&l| Some(l) == self.answer_letter)?;
        candidates.get(k).map(String::as_str)
    }

    /// Chosen candidate first, the rest in candidate order; `None` for an
    /// abstention.
    pub fn to_ranking(&self, sample: &Sample) -> Option<Ranking> {
        let chosen = self.answer(&sample.candidates)?;
        let mut order = vec![chosen.to_string()];
        order.extend(sample.candidates.iter().filter(|c| *c != chosen).cloned());
        Some(Ranking::from_order(sample.sample_id, order))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaCacheRecord {
    pub llm_id: String,
    pub mode: QaMode,
    pub prompt_sha256: String,
    pub response: String,
    pub timestamp: String,
}

fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

type QaKey = (String, QaMode, String);

/// Responses keyed by (llm id, mode, prompt hash); each CoT stage is cached
/// on its own.
pub struct QaCache {
    entries: RwLock<HashMap<QaKey, String>>,
    log: Option<JsonlLog<QaCacheRecord>>,
}

impl QaCache {
    pub fn open(path: &Path) -> Result<Self, QaError> {
        let (log, records) = JsonlLog::<QaCacheRecord>::open(path).map_err(|source| QaError::Cache {
            path: path.display().to_string(),
            source,
        })?;
        let entries = records
            .into_iter()
            .map(|r| ((r.llm_id, r.mode, r.prompt_sha256), r.response))
            .collect();
        Ok(QaCache {
            entries: RwLock::new(entries),
            log: Some(log),
        })
    }

    pub fn in_memory() -> Self {
        QaCache {
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

    pub fn get(&self, llm_id: &str, mode: QaMode, prompt: &str) -> Option<String> {
        self.entries
            .read()
            .unwrap()
            .get(&(llm_id.to_string(), mode, prompt_hash(prompt)))
            .cloned()
    }

    pub fn insert(&self, llm_id: &str, mode: QaMode, prompt: &str, response: &str) -> Result<(), QaError> {
        let hash = prompt_hash(prompt);
        if let Some(log) = &self.log {
            let record = QaCacheRecord {
                llm_id: llm_id.to_string(),
                mode,
                prompt_sha256: hash.clone(),
                response: response.to_string(),
                timestamp: timestamp(),
            };
            log.append(&record).map_err(|source| QaError::Cache {
                path: log.path().display().to_string(),
                source,
            })?;
        }
        self.entries
            .write()
            .unwrap()
            .insert((llm_id.to_string(), mode, hash), response.to_string());
        Ok(())
    }
}

fn ask(
    llm: &dyn CompletionBackend,
    cache: &QaCache,
    prompt: &QaPrompt,
    params: &LlmParams,
    retry: &RetryPolicy,
) -> Result<String, QaError> {
    if let Some(hit) = cache.get(&params.llm_id, prompt.mode, &prompt.rendered) {
        return Ok(hit);
    }
    let response = retry.call(|| llm.complete(&prompt.rendered, params))?;
    cache.insert(&params.llm_id, prompt.mode, &prompt.rendered, &response)?;
    Ok(response)
}

/// Question prompt, then the follow-up carrying the stage-1 reasoning.
pub fn run_cot(
    llm: &dyn CompletionBackend,
    cache: &QaCache,
    sample: &Sample,
    phrase: &str,
    caption_sets: &HashMap<String, CaptionSet>,
    base: CaptionMode,
    params: &LlmParams,
    retry: &RetryPolicy,
) -> Result<QaResult, QaError> {
    let think = build_qa_prompt(phrase, &sample.candidates, caption_sets, QaMode::think(base))?;
    let reasoning = ask(llm, cache, &think, params, retry)?;
    let followup = build_cot_followup(&think, &reasoning);
    let answer = ask(llm, cache, &followup, params, retry)?;
    Ok(QaResult {
        sample_id: sample.sample_id,
        mode: think.mode,
        reasoning: Some(reasoning.clone()),
        answer_letter: parse_answer_letter(&answer),
        raw_response: answer.clone(),
        prompts: vec![think.rendered, followup.rendered],
        responses: vec![reasoning, answer],
    })
}

/// Single-stage question prompt ending at `A: `.
pub fn run_no_cot(
    llm: &dyn CompletionBackend,
    cache: &QaCache,
    sample: &Sample,
    phrase: &str,
    caption_sets: &HashMap<String, CaptionSet>,
    base: CaptionMode,
    params: &LlmParams,
    retry: &RetryPolicy,
) -> Result<QaResult, QaError> {
    let prompt = build_qa_prompt(phrase, &sample.candidates, caption_sets, QaMode::no_cot(base))?;
    let response = ask(llm, cache, &prompt, params, retry)?;
    Ok(QaResult {
        sample_id: sample.sample_id,
        mode: prompt.mode,
        reasoning: None,
        answer_letter: parse_answer_letter(&response),
        raw_response: response.clone(),
        prompts: vec![prompt.rendered],
        responses: vec![response],
    })
}

/// Dispatches on a think (two-stage) or no-CoT (single-stage) mode.
#[allow(clippy::too_many_arguments)]
pub fn run_qa(
    llm: &dyn CompletionBackend,
    cache: &QaCache,
    sample: &Sample,
    phrase: &str,
    caption_sets: &HashMap<String, CaptionSet>,
    mode: QaMode,
    params: &LlmParams,
    retry: &RetryPolicy,
) -> Result<QaResult, QaError> {
    let base = mode.caption_mode().ok_or(QaError::NotRunnable(mode))?;
    if mode.is_think() {
        run_cot(llm, cache, sample, phrase, caption_sets, base, params, retry)
    } else {
        run_no_cot(llm, cache, sample, phrase, caption_sets, base, params, retry)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub sample_id: usize,
    pub mode: QaMode,
    pub prompts: Vec<String>,
    pub responses: Vec<String>,
    pub answer_letter: Option<char>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaFailure {
    pub sample_id: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaRun {
    /// Successful runs in dataset order.
    pub results: Vec<QaResult>,
    pub failures: Vec<QaFailure>,
}

impl QaRun {
    pub fn abstentions(&self) -> usize {
        self.results.iter().filter(|r| r.answer_letter.is_none()).count() + self.failures.len()
    }
}

/// Runs every sample with bounded parallel backend calls. Failed samples
/// are reported and score as abstentions downstream.
#[allow(clippy::too_many_arguments)]
pub fn run_qa_split(
    llm: &dyn CompletionBackend,
    cache: &QaCache,
    dataset: &Dataset,
    caption_sets: &HashMap<String, CaptionSet>,
    mode: QaMode,
    params: &LlmParams,
    retry: &RetryPolicy,
    exec: Exec,
    parallelism: usize,
    transcript: Option<&JsonlLog<TranscriptRecord>>,
) -> Result<QaRun, QaError> {
    mode.caption_mode().ok_or(QaError::NotRunnable(mode))?;
    let outcomes = exec.map_bounded(&dataset.samples, parallelism, |s| {
        run_qa(llm, cache, s, &s.phrase, caption_sets, mode, params, retry)
    });
    let mut run = QaRun {
        results: Vec::new(),
        failures: Vec::new(),
    };
    for (sample, outcome) in dataset.samples.iter().zip(outcomes) {
        match outcome {
            Ok(r) => {
                if let Some(log) = transcript {
                    let rec = TranscriptRecord {
                        sample_id: r.sample_id,
                        mode: r.mode,
                        prompts: r.prompts.clone(),
                        responses: r.responses.clone(),
                        answer_letter: r.answer_letter,
                    };
                    log.append(&rec).map_err(|source| QaError::Cache {
                        path: log.path().display().to_string(),
                        source,
                    })?;
                }
                run.results.push(r);
            }
            Err(e @ QaError::Cache { .. }) => return Err(e),
            Err(e) => {
                log::warn!("QA failed for sample {}: {e}", sample.sample_id);
                run.failures.push(QaFailure {
                    sample_id: sample.sample_id,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::StubLlm;
    use proptest::prelude::*;
    use regex::Regex;

    const DORY: [&str; 10] = [
        "a church with a tall tower and a hedge.",
        "an old airplane sitting on top of a runway.",
        "a small boat in the water with two oars.",
        "the men's rowing team are competing in the men's single sculls.",
        "a large black ship in the water near a harbor.",
        "a ship is on the water with people on it.",
        "a large brick building with a sign on it.",
        "a blue fish (sardines) at the australian aquarium.",
        "a painting of four fish in the water.",
        "a row boat with people on it in the water.",
    ];

    fn dory() -> (Sample, HashMap<String, CaptionSet>) {
        let cands: Vec<String> = (0..10).map(|k| format!("image.{k}.jpg")).collect();
        let sets = cands
            .iter()
            .zip(DORY)
            .map(|(c, cap)| {
                (
                    c.clone(),
                    CaptionSet::from_raw(c.clone(), CaptionMode::Greedy, vec![cap.to_string()], "stub").unwrap(),
                )
            })
            .collect();
        let gold = cands[2].clone();
        (Sample::new(0, "dory", "rowing dory", cands, Some(gold)).unwrap(), sets)
    }

    fn listed() -> String {
        DORY.iter()
            .zip(LETTERS)
            .map(|(c, l)| format!("({l}) {c}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn greedy_prompts_follow_templates() {
        let (s, sets) = dory();
        let think = build_qa_prompt("rowing dory", &s.candidates, &sets, QaMode::ThinkGreedy).unwrap();
        let expected = format!(
            "Q: What is the most appropriate caption for the rowing dory?\nAnswer choices: {}\nA: Let\u{2019}s think step by step. ",
            listed()
        );
        assert_eq!(think.rendered, expected);
        assert!(think.rendered.contains("(C) a small boat in the water with two oars."));
        let plain = build_qa_prompt("rowing dory", &s.candidates, &sets, QaMode::NoCotGreedy).unwrap();
        assert!(plain.rendered.ends_with(&format!("{}\nA: ", listed())));
    }

    #[test]
    fn beam_prompts_join_captions() {
        let (s, _) = dory();
        let sets: HashMap<String, CaptionSet> = s
            .candidates
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let raw = vec![format!("boat {k}"), format!("water {k}")];
                (c.clone(), CaptionSet::from_raw(c.clone(), CaptionMode::Beam, raw, "stub").unwrap())
            })
            .collect();
        let p = build_qa_prompt("rowing dory", &s.candidates, &sets, QaMode::ThinkBeam).unwrap();
        assert!(p
            .rendered
            .starts_with("Q: What is the most appropriate group of captions for the rowing dory?\nAnswer choices: (A) boat 0, water 0 (B) boat 1, water 1"));
        assert!(p.rendered.ends_with("(J) boat 9, water 9\nA: Let\u{2019}s think step by step. "));
        let err = build_qa_prompt("rowing dory", &s.candidates, &sets, QaMode::ThinkGreedy).unwrap_err();
        assert!(matches!(err, QaError::CaptionCountMismatch { actual: 2, .. }));
    }

    #[test]
    fn missing_captions_are_reported() {
        let (s, mut sets) = dory();
        sets.remove(&s.candidates[4]);
        assert!(matches!(
            build_qa_prompt("rowing dory", &s.candidates, &sets, QaMode::NoCotGreedy),
            Err(QaError::MissingCaptions(_))
        ));
    }

    #[test]
    fn cot_chain_sends_reasoning_and_cue() {
        let (s, sets) = dory();
        let think = build_qa_prompt("rowing dory", &s.candidates, &sets, QaMode::ThinkGreedy).unwrap();
        let reasoning = "Out of all the answer choices, (C) \"a small boat in the water with two oars\" would be the most appropriate caption for the rowing dory.";
        let followup = format!("{}{reasoning}\n{COT_FOLLOWUP}", think.rendered);
        let llm = StubLlm::new("unused")
            .reply(think.rendered.clone(), reasoning)
            .reply(followup.clone(), "(C) \"a small boat in the water with two oars.\"");
        let cache = QaCache::in_memory();
        let params = LlmParams::new("stub");
        let r = run_cot(&llm, &cache, &s, "rowing dory", &sets, CaptionMode::Greedy, &params, &RetryPolicy::none()).unwrap();
        assert_eq!(r.answer_letter, Some('C'));
        assert_eq!(r.reasoning.as_deref(), Some(reasoning));
        assert_eq!(r.prompts[1], followup);
        assert!(r.prompts[1].contains(reasoning));
        assert_eq!(r.to_ranking(&s).unwrap().top(), Some("image.2.jpg"));
        assert_eq!(llm.calls(), 2);

        // both stages are cached
        let again = run_cot(&llm, &cache, &s, "rowing dory", &sets, CaptionMode::Greedy, &params, &RetryPolicy::none()).unwrap();
        assert_eq!(again, r);
        assert_eq!(llm.calls(), 2);
    }

    #[test]
    fn abstention_and_no_cot() {
        let (s, sets) = dory();
        let cache = QaCache::in_memory();
        let params = LlmParams::new("stub");
        let llm = StubLlm::new("not applicable without more information about the photo.\"");
        let r = run_cot(&llm, &cache, &s, "rowing dory", &sets, CaptionMode::Greedy, &params, &RetryPolicy::none()).unwrap();
        assert_eq!(r.answer_letter, None);
        assert!(r.to_ranking(&s).is_none());

        let llm = StubLlm::new("The most appropriate caption for the rowing dory would be (J) a row boat with people on it in the water.");
        let r = run_qa(&llm, &cache, &s, "rowing dory", &sets, QaMode::NoCotGreedy, &params, &RetryPolicy::none()).unwrap();
        assert_eq!(r.answer_letter, Some('J'));
        assert_eq!(r.prompts.len(), 1);
    }

    #[test]
    fn cache_persists_and_split_logs_transcripts() {
        let dir = tempfile::tempdir().unwrap();
        let (s, sets) = dory();
        let ds = Dataset {
            split_name: "t".into(),
            samples: vec![s],
            image_dir: Default::default(),
        };
        let params = LlmParams::new("stub");
        let llm = StubLlm::new("the answer is B.");
        let transcript = JsonlLog::create(dir.path().join("qa.jsonl"));
        {
            let cache = QaCache::open(&dir.path().join("cache.jsonl")).unwrap();
            let run = run_qa_split(&llm, &cache, &ds, &sets, QaMode::ThinkGreedy, &params, &RetryPolicy::none(), Exec::Sequential, 2, Some(&transcript)).unwrap();
            assert_eq!(run.results[0].answer_letter, Some('B'));
        }
        let cache = QaCache::open(&dir.path().join("cache.jsonl")).unwrap();
        assert_eq!(cache.len(), 2);
        let quiet = StubLlm::new("(A)");
        let run = run_qa_split(&quiet, &cache, &ds, &sets, QaMode::ThinkGreedy, &params, &RetryPolicy::none(), Exec::default(), 2, None).unwrap();
        assert_eq!(run.results[0].answer_letter, Some('B'));
        assert_eq!(quiet.calls(), 0);
        let text = std::fs::read_to_string(dir.path().join("qa.jsonl")).unwrap();
        let rec: TranscriptRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.answer_letter, Some('B'));
        assert_eq!(rec.prompts.len(), 2);
    }

    #[test]
    fn backend_failures_become_failures() {
        let (s, sets) = dory();
        let ds = Dataset {
            split_name: "t".into(),
            samples: vec![s],
            image_dir: Default::default(),
        };
        let llm = StubLlm::new("x").fail_on("rowing", LlmError::BackendUnavailable("down".into()));
        let run = run_qa_split(&llm, &QaCache::in_memory(), &ds, &sets, QaMode::NoCotBeam, &LlmParams::new("s"), &RetryPolicy::none(), Exec::Sequential, 1, None);
        // greedy captions are valid beam input (one caption each)
        let run = run.unwrap();
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.abstentions(), 1);
    }

    #[test]
    fn parser_cases() {
        assert_eq!(parse_answer_letter(""), None);
        assert_eq!(parse_answer_letter("the answer is C."), Some('C'));
        assert_eq!(parse_answer_letter("The answer is: **D**"), Some('D'));
        assert_eq!(parse_answer_letter("Answer is \"E\""), Some('E'));
        assert_eq!(parse_answer_letter("the answer is Cat"), None);
        assert_eq!(parse_answer_letter("the answer isC"), None);
        assert_eq!(parse_answer_letter("the answer is K"), None);
        assert_eq!(parse_answer_letter("(K) then (B)"), Some('B'));
        assert_eq!(parse_answer_letter("answer is A but (G) fits"), Some('G'));
        assert_eq!(parse_answer_letter("(b) lowercase"), None);
        assert_eq!(parse_answer_letter("not applicable."), None);
    }

    fn oracle(text: &str) -> Option<char> {
        let paren = Regex::new(r"\(([A-J])\)").unwrap();
        if let Some(c) = paren.captures(text) {
            return c[1].chars().next();
        }
        let cue = Regex::new(r#"(?i:answer is)[\s:"'*\u{201c}\u{201d}\u{2018}\u{2019}]+([A-J])(?:[^\p{Alphabetic}\p{N}]|$)"#).unwrap();
        cue.captures(text).and_then(|c| c[1].chars().next())
    }

    proptest! {
        #[test]
        fn parser_matches_regex_oracle(
            parts in proptest::collection::vec(
                prop_oneof![
                    Just("answer is".to_string()),
                    Just("Answer Is".to_string()),
                    Just("(".to_string()),
                    Just(")".to_string()),
                    Just(" ".to_string()),
                    Just(":".to_string()),
                    Just("\"".to_string()),
                    Just("*".to_string()),
                    "[A-L]",
                    "[a-z]{1,3}",
                    Just(".".to_string()),
                ],
                0..14,
            )
        ) {
            let text: String = parts.concat();
            let got = parse_answer_letter(&text);
            prop_assert_eq!(got, oracle(&text), "text: {:?}", text);
            if let Some(l) = got {
                prop_assert!(LETTERS.contains(&l));
                prop_assert_eq!(parse_answer_letter(&format!("({l})")), Some(l));
            }
        }
    }
}
