//! The staged pipeline. Each stage reads its upstream artifacts from the
//! cache root, writes its own, and records a completion marker last.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vwsd_core::captions::{generate_captions_cached, caption_scores, CaptionCache, CaptionMode, CaptionSet};
use vwsd_core::dataset::{load_dataset, validate_images};
use vwsd_core::embeddings::{embed_image_files_with, embed_texts_with};
use vwsd_core::enhancement::{enhance_split, find_template, EnhancedPhrase, EnhancementCache, SplitOptions};
use vwsd_core::evaluation::{evaluate, report, EvalReport, ReportTable};
use vwsd_core::features::{assemble_matrix, assemble_matrix_for_schema, FamilyScores, FeatureMatrix};
use vwsd_core::jsonl::{timestamp, JsonlLog};
use vwsd_core::kb::{fetch_kb_images, kb_scores, KbCache, KbImageSet, KbSource};
use vwsd_core::llm::{LlmParams, RetryPolicy};
use vwsd_core::ltr::{predict_rank, train_ltr, LtrModel};
use vwsd_core::qa::{run_qa_split, QaCache, QaMode, QaResult, TranscriptRecord};
use vwsd_core::scoring::{compute_penalty_with, score_candidates, PenaltyTable};
use vwsd_core::{Dataset, Embedding, EmbeddingKind, EmbeddingStore, Exec, Ranking};

use crate::backends::BackendSource;
use crate::config::{PenaltyScope, PipelineConfig};
use crate::error::PipelineError;
use crate::stages::{self, read_json, write_json, CacheLock, StageMarker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Enhance,
    Caption,
    KbFetch,
    Embed,
    Score,
    Features,
    TrainLtr,
    Qa,
    Predict,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Prepare,
        Stage::Enhance,
        Stage::Caption,
        Stage::KbFetch,
        Stage::Embed,
        Stage::Score,
        Stage::Features,
        Stage::TrainLtr,
        Stage::Qa,
        Stage::Predict,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Enhance => "enhance",
            Stage::Caption => "caption",
            Stage::KbFetch => "kb-fetch",
            Stage::Embed => "embed",
            Stage::Score => "score",
            Stage::Features => "features",
            Stage::TrainLtr => "train-ltr",
            Stage::Qa => "qa",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
}

/// Space id and counts recorded by the embed stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedSummary {
    space_id: String,
    texts: usize,
    images: usize,
    newly_embedded: usize,
}

type EnhanceArtifact = BTreeMap<String, Vec<EnhancedPhrase>>;
type CaptionArtifact = BTreeMap<String, CaptionSet>;
type KbArtifact = Vec<Option<KbImageSet>>;
type QaArtifact = Vec<Option<QaResult>>;

const EMBED_CHUNK: usize = 256;

/// Resolves `all`, exact ids and `*` globs against the available family
/// ids, keeping their order.
pub fn select_families(patterns: &[String], available: &[String]) -> Result<Vec<String>, PipelineError> {
    let mut keep = vec![false; available.len()];
    for p in patterns {
        let p = p.trim();
        let mut hit = false;
        for (k, id) in available.iter().enumerate() {
            if p == "all" || glob_match(p, id) {
                keep[k] = true;
                hit = true;
            }
        }
        if !hit {
            return Err(PipelineError::Config(format!(
                "family pattern `{p}` matches none of: {}",
                available.join(", ")
            )));
        }
    }
    Ok(available
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(id, _)| id.clone())
        .collect())
}

/// `*` matches any run of characters; everything else is literal.
fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn image_key(split: &str, image_id: &str) -> String {
    format!("{split}/{image_id}")
}

fn kb_key(source: KbSource, path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!("kb/{source}/{name}")
}

pub struct Pipeline<'a> {
    cfg: &'a PipelineConfig,
    backends: &'a dyn BackendSource,
    root: PathBuf,
    exec: Exec,
    digests: RefCell<HashMap<Stage, String>>,
    datasets: RefCell<HashMap<&'static str, Dataset>>,
    _lock: CacheLock,
}

impl<'a> Pipeline<'a> {
    /// Takes the cache-root lock for the pipeline's lifetime.
    pub fn new(cfg: &'a PipelineConfig, backends: &'a dyn BackendSource) -> Result<Self, PipelineError> {
        let lock = CacheLock::acquire(&cfg.cache_root)?;
        Ok(Pipeline {
            cfg,
            backends,
            root: cfg.cache_root.clone(),
            exec: cfg.exec(),
            digests: RefCell::new(HashMap::new()),
            datasets: RefCell::new(HashMap::new()),
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stages `run` executes, in order.
    pub fn plan(&self) -> Vec<Stage> {
        let cfg = self.cfg;
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::TrainLtr => cfg.train.is_some(),
                Stage::Qa => cfg.qa.enabled || cfg.predict_system() == "qa",
                Stage::Evaluate => cfg.test.gold.is_some(),
                _ => true,
            })
            .collect()
    }

    pub fn run_all(&self) -> Result<Vec<StageReport>, PipelineError> {
        self.plan().into_iter().map(|s| self.run(s)).collect()
    }

    /// Runs one stage unless its marker already matches the current inputs.
    pub fn run(&self, stage: Stage) -> Result<StageReport, PipelineError> {
        for up in self.upstream(stage) {
            self.require(up)?;
        }
        let inputs = self.inputs(stage)?;
        let digest = self.digest(stage)?;
        if stages::is_satisfied(&self.root, stage.name(), &digest) {
            log::info!("{stage}: up to date");
            return Ok(StageReport {
                stage,
                status: StageStatus::UpToDate,
            });
        }
        log::info!("{stage}: running");
        let outputs = match stage {
            Stage::Prepare => self.prepare()?,
            Stage::Enhance => self.enhance()?,
            Stage::Caption => self.caption()?,
            Stage::KbFetch => self.kb_fetch()?,
            Stage::Embed => self.embed()?,
            Stage::Score => self.score()?,
            Stage::Features => self.features()?,
            Stage::TrainLtr => self.train()?,
            Stage::Qa => self.qa()?,
            Stage::Predict => self.predict()?,
            Stage::Evaluate => self.evaluate_stage()?,
        };
        stages::write_marker(
            &self.root,
            &StageMarker {
                stage: stage.name().to_string(),
                digest,
                inputs,
                outputs,
                completed_at: timestamp(),
            },
        )?;
        Ok(StageReport {
            stage,
            status: StageStatus::Ran,
        })
    }

    fn upstream(&self, stage: Stage) -> Vec<Stage> {
        use Stage::*;
        match stage {
            Prepare => vec![],
            Enhance | Caption | KbFetch => vec![Prepare],
            Embed | Score => {
                let mut v = vec![Prepare, Enhance, Caption, KbFetch];
                if stage == Score {
                    v.push(Embed);
                }
                v
            }
            Features => vec![Score],
            TrainLtr => vec![Features],
            Qa => vec![Prepare, Caption],
            Predict => match self.cfg.predict_system().as_str() {
                "ltr" => vec![Features, TrainLtr],
                "qa" => vec![Qa],
                _ => vec![Score],
            },
            Evaluate => {
                let mut v = vec![Score];
                if self.cfg.train.is_some() {
                    v.extend([Features, TrainLtr]);
                }
                if self.cfg.qa.enabled {
                    v.push(Qa);
                }
                v
            }
        }
    }

    /// The upstream stage must have completed with its current inputs.
    fn require(&self, stage: Stage) -> Result<(), PipelineError> {
        let digest = self.digest(stage)?;
        if stages::is_satisfied(&self.root, stage.name(), &digest) {
            Ok(())
        } else {
            Err(PipelineError::MissingUpstream {
                stage: stage.name().to_string(),
                artifact: stages::marker_path(&self.root, stage.name()),
            })
        }
    }

    fn digest(&self, stage: Stage) -> Result<String, PipelineError> {
        if let Some(d) = self.digests.borrow().get(&stage) {
            return Ok(d.clone());
        }
        let d = stages::digest(stage.name(), &self.inputs(stage)?);
        self.digests.borrow_mut().insert(stage, d.clone());
        Ok(d)
    }

    fn caption_modes(&self) -> Vec<CaptionMode> {
        let mut modes: Vec<CaptionMode> = self.cfg.caption_modes.clone();
        if self.cfg.qa.enabled {
            if let Some(m) = self.cfg.qa.mode.caption_mode() {
                modes.push(m);
            }
        }
        let mut seen = BTreeSet::new();
        modes.retain(|m| seen.insert(m.as_str()));
        modes
    }

    /// Config slice plus upstream digests.
    fn inputs(&self, stage: Stage) -> Result<Value, PipelineError> {
        let cfg = self.cfg;
        let mut upstream = BTreeMap::new();
        for up in self.upstream(stage) {
            upstream.insert(up.name(), self.digest(up)?);
        }
        let slice = match stage {
            Stage::Prepare => {
                let mut splits = BTreeMap::new();
                for name in cfg.split_names() {
                    let sp = cfg.split(name).expect("listed split");
                    splits.insert(
                        name,
                        json!({
                            "data": stages::file_digest(&sp.data)?,
                            "gold": sp.gold.as_deref().map(stages::file_digest).transpose()?,
                            "images": sp.images,
                        }),
                    );
                }
                json!({ "splits": splits })
            }
            Stage::Enhance => json!({
                "templates": cfg.templates,
                "llm": cfg.llm,
                "params": cfg.llm_params,
            }),
            Stage::Caption => json!({ "captioner": cfg.captioner, "modes": self.caption_modes() }),
            Stage::KbFetch => json!({
                "client": cfg.kb.client,
                "sources": cfg.kb.sources,
                "k": cfg.kb.k,
            }),
            Stage::Embed => json!({ "embedder": cfg.embedder, "caption_modes": cfg.caption_modes }),
            Stage::Score => json!({
                "metric": cfg.metric,
                "penalty": cfg.penalty,
                "templates": cfg.templates,
                "caption_modes": cfg.caption_modes,
                "kb_sources": cfg.kb.sources,
                "kb_aggregation": cfg.kb.aggregation,
            }),
            Stage::Features => json!({ "families": cfg.families }),
            Stage::TrainLtr => json!({ "ltr": cfg.ltr, "validation_fraction": cfg.validation_fraction }),
            Stage::Qa => json!({
                "llm": cfg.llm,
                "mode": cfg.qa.mode,
                "max_tokens": cfg.qa.max_tokens,
                "temperature": cfg.llm_params.temperature,
            }),
            Stage::Predict => json!({ "system": cfg.predict_system(), "output": cfg.output }),
            Stage::Evaluate => json!({}),
        };
        Ok(json!({ "config": slice, "upstream": upstream }))
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn dataset(&self, split: &'static str) -> Result<Dataset, PipelineError> {
        if let Some(ds) = self.datasets.borrow().get(split) {
            return Ok(ds.clone());
        }
        let sp = self
            .cfg
            .split(split)
            .ok_or_else(|| PipelineError::Config(format!("no `{split}` split configured")))?;
        let mut ds = load_dataset(&sp.data, sp.gold.as_deref(), &sp.images)
            .map_err(|e| PipelineError::stage("prepare", e))?;
        ds.split_name = split.to_string();
        self.datasets.borrow_mut().insert(split, ds.clone());
        Ok(ds)
    }

    fn prepare(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut outputs = Vec::new();
        for split in self.cfg.split_names() {
            let ds = self.dataset(split)?;
            let missing = validate_images(&ds);
            if !missing.is_empty() {
                return Err(PipelineError::stage(
                    "prepare",
                    format!(
                        "{split}: {} candidate images missing under {} (first: {})",
                        missing.len(),
                        ds.image_dir.display(),
                        missing[0]
                    ),
                ));
            }
            let out = self.path(format!("prepare/{split}.json"));
            write_json(
                &out,
                &json!({
                    "split": split,
                    "samples": ds.len(),
                    "images": ds.unique_images().len(),
                    "has_gold": ds.has_gold(),
                }),
            )?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    fn llm_params(&self) -> LlmParams {
        LlmParams {
            llm_id: self.cfg.llm.id(),
            max_tokens: self.cfg.llm_params.max_tokens,
            temperature: self.cfg.llm_params.temperature,
        }
    }

    fn enhance(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let templates: Vec<_> = self
            .cfg
            .templates
            .iter()
            .map(|t| find_template(t).expect("validated template"))
            .collect();
        let cache = EnhancementCache::open(&self.path("enhance/completions.jsonl"))
            .map_err(|e| PipelineError::stage("enhance", e))?;
        let params = self.llm_params();
        let options = SplitOptions {
            exec: self.exec,
            parallelism: self.cfg.parallelism,
            retry: RetryPolicy::default(),
        };
        let mut outputs = Vec::new();
        for split in self.cfg.split_names() {
            let ds = self.dataset(split)?;
            let mut artifact = EnhanceArtifact::new();
            if !templates.is_empty() {
                let llm = self.backends.llm()?;
                let run = enhance_split(llm.as_ref(), &templates, &ds, &params, &cache, &options);
                if !run.failures.is_empty() {
                    log::warn!("enhance {split}: {} cells fell back to the original phrase", run.failures.len());
                }
                for t in &templates {
                    let list = ds
                        .samples
                        .iter()
                        .map(|s| run.get(t.name(), s.sample_id).cloned().expect("every cell present"))
                        .collect();
                    artifact.insert(t.name().to_string(), list);
                }
            }
            let out = self.path(format!("enhance/{split}.json"));
            write_json(&out, &artifact)?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    fn caption(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let cache = CaptionCache::open(&self.path("captions/cache.jsonl"))
            .map_err(|e| PipelineError::stage("caption", e))?;
        let modes = self.caption_modes();
        let mut outputs = Vec::new();
        for split in self.cfg.split_names() {
            let ds = self.dataset(split)?;
            let images = ds.unique_images();
            for &mode in &modes {
                let captioner = self.backends.captioner()?;
                let sets = self.exec.map_bounded(&images, self.cfg.parallelism, |id| {
                    generate_captions_cached(captioner.as_ref(), id, &ds.image_dir, mode, &cache)
                });
                let mut artifact = CaptionArtifact::new();
                for (id, set) in images.iter().zip(sets) {
                    artifact.insert(id.clone(), set.map_err(|e| PipelineError::stage("caption", e))?);
                }
                let out = self.path(format!("captions/{split}.{mode}.json"));
                write_json(&out, &artifact)?;
                outputs.push(out);
            }
        }
        Ok(outputs)
    }

    fn kb_fetch(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut outputs = Vec::new();
        if !self.cfg.kb.enabled() {
            return Ok(outputs);
        }
        let client = self.backends.kb()?;
        let cache = KbCache::open(&self.path("kb/images")).map_err(|e| PipelineError::stage("kb-fetch", e))?;
        for split in self.cfg.split_names() {
            let ds = self.dataset(split)?;
            let phrases: Vec<String> = ds
                .samples
                .iter()
                .map(|s| s.phrase.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            for &source in &self.cfg.kb.sources {
                let fetched = self.exec.map_bounded(&phrases, self.cfg.parallelism, |p| {
                    fetch_kb_images(client.as_ref(), p, source, self.cfg.kb.k, &cache)
                });
                let mut by_phrase = HashMap::new();
                for (p, r) in phrases.iter().zip(fetched) {
                    match r {
                        Ok(set) => {
                            by_phrase.insert(p.as_str(), set);
                        }
                        Err(e) => log::warn!("kb {source} lookup for `{p}` failed: {e}"),
                    }
                }
                let artifact: KbArtifact = ds
                    .samples
                    .iter()
                    .map(|s| by_phrase.get(s.phrase.as_str()).cloned())
                    .collect();
                let out = self.path(format!("kb/{split}.{source}.json"));
                write_json(&out, &artifact)?;
                outputs.push(out);
            }
        }
        Ok(outputs)
    }

    fn load_enhanced(&self, split: &str) -> Result<EnhanceArtifact, PipelineError> {
        read_json(&self.path(format!("enhance/{split}.json")), "enhance")
    }

    fn load_captions(&self, split: &str, mode: CaptionMode) -> Result<CaptionArtifact, PipelineError> {
        read_json(&self.path(format!("captions/{split}.{mode}.json")), "caption")
    }

    fn load_kb(&self, split: &str, source: KbSource) -> Result<KbArtifact, PipelineError> {
        read_json(&self.path(format!("kb/{split}.{source}.json")), "kb-fetch")
    }

    fn embed(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let backend = self.backends.embedder()?;
        let space = backend.space_id().to_string();
        let mut store =
            EmbeddingStore::open(self.path("embeddings")).map_err(|e| PipelineError::stage("embed", e))?;
        let mut texts = BTreeSet::new();
        let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
        for split in self.cfg.split_names() {
            let ds = self.dataset(split)?;
            texts.extend(ds.samples.iter().map(|s| s.phrase.clone()));
            for list in self.load_enhanced(split)?.values() {
                texts.extend(list.iter().map(|e| e.enhanced_text.clone()));
            }
            for &mode in &self.cfg.caption_modes {
                for set in self.load_captions(split, mode)?.values() {
                    texts.extend(set.captions.iter().cloned());
                }
            }
            for id in ds.unique_images() {
                images.insert(image_key(split, &id), ds.image_path(&id));
            }
            if self.cfg.kb.enabled() {
                for &source in &self.cfg.kb.sources {
                    for set in self.load_kb(split, source)?.into_iter().flatten() {
                        for img in set.images {
                            images.insert(kb_key(source, &img.local_path), img.local_path);
                        }
                    }
                }
            }
        }
        texts.retain(|t| !t.trim().is_empty());
        let todo_texts: Vec<String> = texts
            .iter()
            .filter(|t| !store.contains(&space, EmbeddingKind::Text, t))
            .cloned()
            .collect();
        let todo_images: Vec<(String, PathBuf)> = images
            .iter()
            .filter(|(k, _)| !store.contains(&space, EmbeddingKind::Image, k))
            .map(|(k, p)| (k.clone(), p.clone()))
            .collect();
        let embed_err = |e| PipelineError::stage("embed", e);
        for chunk in todo_texts.chunks(EMBED_CHUNK) {
            let embs = embed_texts_with(self.exec, backend.as_ref(), chunk).map_err(embed_err)?;
            store
                .put_many(EmbeddingKind::Text, chunk.iter().map(String::as_str).zip(&embs))
                .map_err(embed_err)?;
        }
        for chunk in todo_images.chunks(EMBED_CHUNK) {
            let embs = embed_image_files_with(self.exec, backend.as_ref(), chunk).map_err(embed_err)?;
            store
                .put_many(EmbeddingKind::Image, chunk.iter().map(|(k, _)| k.as_str()).zip(&embs))
                .map_err(embed_err)?;
        }
        let summary = EmbedSummary {
            space_id: space,
            texts: texts.len(),
            images: images.len(),
            newly_embedded: todo_texts.len() + todo_images.len(),
        };
        let out = self.path("embed/summary.json");
        write_json(&out, &summary)?;
        Ok(vec![out, self.path("embeddings/index.json")])
    }

    fn score(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let summary: EmbedSummary = read_json(&self.path("embed/summary.json"), "embed")?;
        let store = EmbeddingStore::open(self.path("embeddings")).map_err(|e| PipelineError::stage("score", e))?;
        let space = summary.space_id.as_str();
        let text = |t: &str| {
            store
                .get(space, EmbeddingKind::Text, t)
                .ok_or_else(|| PipelineError::stage("score", format!("no embedding for text `{t}`")))
        };
        let mut phrase_sets: BTreeMap<&'static str, (Vec<Embedding>, EnhanceArtifact)> = BTreeMap::new();
        for split in self.cfg.split_names() {
            let ds = self.dataset(split)?;
            let phrases = ds.samples.iter().map(|s| text(&s.phrase)).collect::<Result<Vec<_>, _>>()?;
            phrase_sets.insert(split, (phrases, self.load_enhanced(split)?));
        }
        let mut outputs = Vec::new();
        for split in self.cfg.split_names() {
            let families = self.score_split(split, &store, space, &phrase_sets)?;
            let out = self.path(format!("scores/{split}.json"));
            write_json(&out, &families)?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    fn score_split(
        &self,
        split: &'static str,
        store: &EmbeddingStore,
        space: &str,
        phrase_sets: &BTreeMap<&'static str, (Vec<Embedding>, EnhanceArtifact)>,
    ) -> Result<Vec<FamilyScores>, PipelineError> {
        let cfg = self.cfg;
        let err = |e: &dyn fmt::Display| PipelineError::stage("score", e);
        let ds = self.dataset(split)?;
        let get = |kind, key: &str| {
            store
                .get(space, kind, key)
                .ok_or_else(|| PipelineError::stage("score", format!("no {kind:?} embedding for `{key}`")))
        };
        let mut images: HashMap<String, Embedding> = HashMap::new();
        for id in ds.unique_images() {
            images.insert(id.clone(), get(EmbeddingKind::Image, &image_key(split, &id))?);
        }
        let scope: Vec<&'static str> = match cfg.penalty.scope {
            PenaltyScope::Split => vec![split],
            PenaltyScope::TrainTest => cfg.split_names(),
        };
        let penalty_for = |template: Option<&str>| -> Result<PenaltyTable, PipelineError> {
            let mut embs = Vec::new();
            for s in &scope {
                let (phrases, enhanced) = &phrase_sets[s];
                match template {
                    None => embs.extend(phrases.iter().cloned()),
                    Some(t) => {
                        for e in &enhanced[t] {
                            embs.push(get(EmbeddingKind::Text, &e.enhanced_text)?);
                        }
                    }
                }
            }
            compute_penalty_with(self.exec, &embs, images.iter().map(|(k, v)| (k.as_str(), v)), cfg.penalty.alpha)
                .map_err(|e| err(&e))
        };
        let vl_scores = |phrases: &[Embedding], penalty: Option<&PenaltyTable>| {
            self.exec
                .try_map(&ds.samples, |s| {
                    score_candidates(s, &phrases[s_index(&ds, s.sample_id)], &images, cfg.metric, penalty).map(Some)
                })
                .map_err(|e| err(&e))
        };
        let (phrases, enhanced) = &phrase_sets[split];
        let mut families = Vec::new();
        let mut push_vl = |id: String, embs: &[Embedding], template: Option<&str>| -> Result<(), PipelineError> {
            families.push(FamilyScores::new(id.clone(), vl_scores(embs, None)?));
            if cfg.penalty.enabled {
                let table = penalty_for(template)?;
                families.push(FamilyScores::new(format!("{id}+penalty"), vl_scores(embs, Some(&table))?));
            }
            Ok(())
        };
        push_vl("baseline".into(), phrases, None)?;
        let mut enhanced_embs: BTreeMap<&str, Vec<Embedding>> = BTreeMap::new();
        for t in &cfg.templates {
            let embs = enhanced[t.as_str()]
                .iter()
                .map(|e| get(EmbeddingKind::Text, &e.enhanced_text))
                .collect::<Result<Vec<_>, _>>()?;
            push_vl(format!("enhanced:{t}"), &embs, Some(t))?;
            enhanced_embs.insert(t.as_str(), embs);
        }
        for &mode in &cfg.caption_modes {
            let sets = self.load_captions(split, mode)?;
            let mut cap_embs: HashMap<&str, Vec<Embedding>> = HashMap::new();
            for (id, set) in &sets {
                let embs = set
                    .captions
                    .iter()
                    .map(|c| get(EmbeddingKind::Text, c))
                    .collect::<Result<Vec<_>, _>>()?;
                cap_embs.insert(id.as_str(), embs);
            }
            let caption_family = |query: &[Embedding]| -> Result<Vec<Option<Vec<f64>>>, PipelineError> {
                self.exec.try_map(&ds.samples, |s| {
                    let per_candidate = s
                        .candidates
                        .iter()
                        .map(|c| {
                            cap_embs.get(c.as_str()).cloned().ok_or_else(|| {
                                PipelineError::stage("score", format!("no captions for `{c}`"))
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    caption_scores(&query[s_index(&ds, s.sample_id)], &per_candidate, cfg.metric)
                        .map(Some)
                        .map_err(|e| err(&e))
                })
            };
            families.push(FamilyScores::new(
                format!("captions:{mode}:{}:t", cfg.metric),
                caption_family(phrases)?,
            ));
            for t in &cfg.templates {
                families.push(FamilyScores::new(
                    format!("captions:{mode}:{}:te:{t}", cfg.metric),
                    caption_family(&enhanced_embs[t.as_str()])?,
                ));
            }
        }
        if cfg.kb.enabled() {
            for &source in &cfg.kb.sources {
                let kb = self.load_kb(split, source)?;
                let scores = ds
                    .samples
                    .iter()
                    .zip(&kb)
                    .map(|(s, set)| {
                        let embs = match set {
                            Some(set) => set
                                .images
                                .iter()
                                .map(|img| get(EmbeddingKind::Image, &kb_key(source, &img.local_path)))
                                .collect::<Result<Vec<_>, _>>()?,
                            None => Vec::new(),
                        };
                        kb_scores(s, &embs, &images, cfg.metric, cfg.kb.aggregation).map_err(|e| err(&e))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                families.push(FamilyScores::new(format!("kb:{source}:{}", cfg.metric), scores).optional(true));
            }
        }
        Ok(families)
    }

    fn load_scores(&self, split: &str) -> Result<Vec<FamilyScores>, PipelineError> {
        read_json(&self.path(format!("scores/{split}.json")), "score")
    }

    fn features(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let err = |e| PipelineError::stage("features", e);
        let reference = if self.cfg.train.is_some() { "train" } else { "test" };
        let ref_families = self.load_scores(reference)?;
        let available: Vec<String> = ref_families.iter().map(|f| f.family_id.clone()).collect();
        let selected = select_families(&self.cfg.families, &available)?;
        let pick = |all: Vec<FamilyScores>| -> Vec<FamilyScores> {
            all.into_iter().filter(|f| selected.contains(&f.family_id)).collect()
        };
        let ref_ds = self.dataset(reference)?;
        let ref_matrix =
            assemble_matrix(&pick(ref_families), &ref_ds, ref_ds.has_gold(), self.exec).map_err(err)?;
        let mut outputs = Vec::new();
        let ref_out = self.path(format!("features/{reference}.csv"));
        ref_matrix.write_csv(&ref_out).map_err(err)?;
        outputs.push(ref_out);
        if reference == "train" {
            let test = self.dataset("test")?;
            let m = assemble_matrix_for_schema(
                &pick(self.load_scores("test")?),
                &test,
                test.has_gold(),
                &ref_matrix.schema,
                self.exec,
            )
            .map_err(err)?;
            let out = self.path("features/test.csv");
            m.write_csv(&out).map_err(err)?;
            outputs.push(out);
        }
        Ok(outputs)
    }

    fn load_matrix(&self, split: &str) -> Result<FeatureMatrix, PipelineError> {
        let path = self.path(format!("features/{split}.csv"));
        if !path.is_file() {
            return Err(PipelineError::MissingUpstream {
                stage: "features".into(),
                artifact: path,
            });
        }
        FeatureMatrix::read_csv(&path).map_err(|e| PipelineError::stage("features", e))
    }

    fn train(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let matrix = self.load_matrix("train")?;
        let model = train_ltr(&matrix, &self.cfg.ltr, self.cfg.validation_fraction, self.exec)
            .map_err(|e| PipelineError::stage("train-ltr", e))?;
        log::info!(
            "train-ltr: {} trees kept of {}, validation NDCG@10 {:.4} on {} groups",
            model.summary.best_iteration,
            model.summary.trees_built,
            model.summary.best_validation_ndcg,
            model.summary.validation_groups
        );
        let out = self.path("ltr/model.json");
        stages::write_atomic(&out, model.to_json().as_bytes())?;
        Ok(vec![out])
    }

    fn load_model(&self) -> Result<LtrModel, PipelineError> {
        let path = self.path("ltr/model.json");
        let text = fs::read_to_string(&path).map_err(|_| PipelineError::MissingUpstream {
            stage: "train-ltr".into(),
            artifact: path.clone(),
        })?;
        LtrModel::from_json(&text).map_err(|e| PipelineError::stage("train-ltr", format!("{}: {e}", path.display())))
    }

    fn qa_path(&self, mode: QaMode) -> PathBuf {
        self.path(format!("qa/test.{mode}.json"))
    }

    fn qa(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let err = |e| PipelineError::stage("qa", e);
        let mode = self.cfg.qa.mode;
        let cap_mode = mode.caption_mode().ok_or_else(|| PipelineError::Config(format!("qa mode {mode} is not runnable")))?;
        let cap_path = self.path(format!("captions/test.{cap_mode}.json"));
        if !cap_path.is_file() {
            return Err(PipelineError::MissingUpstream {
                stage: "caption".into(),
                artifact: cap_path,
            });
        }
        let captions: HashMap<String, CaptionSet> = self.load_captions("test", cap_mode)?.into_iter().collect();
        let ds = self.dataset("test")?;
        let cache = QaCache::open(&self.path("qa/cache.jsonl")).map_err(err)?;
        let transcript_path = self.path(format!("qa/test.{mode}.transcript.jsonl"));
        let _ = fs::remove_file(&transcript_path);
        let transcript = JsonlLog::<TranscriptRecord>::create(&transcript_path);
        let params = LlmParams {
            llm_id: self.cfg.llm.id(),
            max_tokens: self.cfg.qa.max_tokens,
            temperature: self.cfg.llm_params.temperature,
        };
        let llm = self.backends.llm()?;
        let run = run_qa_split(
            llm.as_ref(),
            &cache,
            &ds,
            &captions,
            mode,
            &params,
            &RetryPolicy::default(),
            self.exec,
            self.cfg.parallelism,
            Some(&transcript),
        )
        .map_err(err)?;
        for f in &run.failures {
            log::warn!("qa sample {}: {}", f.sample_id, f.error);
        }
        log::info!("qa: {} abstentions of {}", run.abstentions(), ds.len());
        let mut by_id: HashMap<usize, QaResult> = run.results.into_iter().map(|r| (r.sample_id, r)).collect();
        let artifact: QaArtifact = ds.samples.iter().map(|s| by_id.remove(&s.sample_id)).collect();
        let out = self.qa_path(mode);
        write_json(&out, &artifact)?;
        Ok(vec![out, transcript_path])
    }

    /// Rankings of one system on the test split; `None` entries are
    /// abstentions.
    fn system_rankings(&self, system: &str) -> Result<Vec<Option<Ranking>>, PipelineError> {
        let ds = self.dataset("test")?;
        if system == "ltr" {
            let model = self.load_model()?;
            let matrix = self.load_matrix("test")?;
            let rankings =
                predict_rank(&model, &matrix, self.exec).map_err(|e| PipelineError::stage("predict", e))?;
            return Ok(rankings.into_iter().map(Some).collect());
        }
        if let Some(mode) = system.strip_prefix("qa") {
            let mode = match mode.strip_prefix(':') {
                Some(m) => QaMode::from_str(m).map_err(|e| PipelineError::Config(e.to_string()))?,
                None if mode.is_empty() => self.cfg.qa.mode,
                None => return Err(PipelineError::Config(format!("unknown system `{system}`"))),
            };
            let results: QaArtifact = read_json(&self.qa_path(mode), "qa")?;
            return Ok(ds
                .samples
                .iter()
                .zip(results)
                .map(|(s, r)| r.and_then(|r| r.to_ranking(s)))
                .collect());
        }
        let families = self.load_scores("test")?;
        let fam = families
            .iter()
            .find(|f| f.family_id == system)
            .ok_or_else(|| PipelineError::Config(format!("unknown system `{system}`")))?;
        Ok(ds
            .samples
            .iter()
            .zip(&fam.scores)
            .map(|(s, sc)| sc.as_ref().map(|sc| Ranking::from_scores(s.sample_id, &s.candidates, sc)))
            .collect())
    }

    fn predict(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let system = self.cfg.predict_system();
        let ds = self.dataset("test")?;
        let rankings = self.system_rankings(&system)?;
        let mut body = String::new();
        for (s, r) in ds.samples.iter().zip(rankings) {
            // an abstaining system falls back to the given candidate order
            let order = r.map(|r| r.candidates).unwrap_or_else(|| s.candidates.clone());
            body.push_str(&order.join("\t"));
            body.push('\n');
        }
        let out = self.path(format!("predictions/test.{}.tsv", file_safe(&system)));
        stages::write_atomic(&out, body.as_bytes())?;
        let mut outputs = vec![out];
        if let Some(copy) = &self.cfg.output {
            stages::write_atomic(copy, body.as_bytes())?;
            outputs.push(copy.clone());
        }
        Ok(outputs)
    }

    fn evaluate_systems(&self) -> Result<ReportTable, PipelineError> {
        let ds = self.dataset("test")?;
        if !ds.has_gold() {
            return Err(PipelineError::Config("evaluation needs a gold file for the test split".into()));
        }
        let mut systems: Vec<String> = self.load_scores("test")?.into_iter().map(|f| f.family_id).collect();
        if self.cfg.train.is_some() {
            systems.push("ltr".into());
        }
        if self.cfg.qa.enabled {
            systems.push(format!("qa:{}", self.cfg.qa.mode));
        }
        let mut reports = Vec::new();
        for system in systems {
            let rankings: Vec<Ranking> = self.system_rankings(&system)?.into_iter().flatten().collect();
            reports.push(evaluate(&system, &ds, &rankings).map_err(|e| PipelineError::stage("evaluate", e))?);
        }
        Ok(report(reports))
    }

    fn evaluate_stage(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let table = self.evaluate_systems()?;
        self.write_report("test", &table)
    }

    fn write_report(&self, name: &str, table: &ReportTable) -> Result<Vec<PathBuf>, PipelineError> {
        let files = [
            (format!("reports/{name}.txt"), table.to_text()),
            (format!("reports/{name}.csv"), table.to_csv()),
            (format!("reports/{name}.per_sample.csv"), table.per_sample_csv()),
        ];
        let mut outputs = Vec::new();
        for (rel, body) in files {
            let p = self.path(rel);
            stages::write_atomic(&p, body.as_bytes())?;
            outputs.push(p);
        }
        Ok(outputs)
    }

    pub fn report_text(&self) -> Result<String, PipelineError> {
        let p = self.path("reports/test.txt");
        fs::read_to_string(&p).map_err(|_| PipelineError::MissingUpstream {
            stage: "evaluate".into(),
            artifact: p,
        })
    }

    /// Scores an externally produced prediction file against the test gold.
    pub fn evaluate_predictions(&self, path: &Path) -> Result<EvalReport, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let ds = self.dataset("test")?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != ds.len() {
            return Err(PipelineError::stage(
                "evaluate",
                format!("{} has {} lines for {} samples", path.display(), lines.len(), ds.len()),
            ));
        }
        let rankings: Vec<Ranking> = ds
            .samples
            .iter()
            .zip(lines)
            .map(|(s, l)| Ranking::from_order(s.sample_id, l.split('\t').map(|c| c.trim().to_string()).collect()))
            .collect();
        let system = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        evaluate(&system, &ds, &rankings).map_err(|e| PipelineError::stage("evaluate", e))
    }

    pub fn prediction_path(&self) -> PathBuf {
        self.path(format!("predictions/test.{}.tsv", file_safe(&self.cfg.predict_system())))
    }
}

fn s_index(ds: &Dataset, sample_id: usize) -> usize {
    // sample ids are dataset positions
    debug_assert_eq!(ds.samples[sample_id].sample_id, sample_id);
    sample_id
}
