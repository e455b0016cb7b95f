//! Pipeline configuration: one JSON document, with command-line overrides
//! applied as dotted-path assignments before deserialization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vwsd_core::captions::CaptionMode;
use vwsd_core::enhancement::find_template;
use vwsd_core::kb::{KbAggregation, KbSource, DEFAULT_K};
use vwsd_core::ltr::LtrHyperparams;
use vwsd_core::qa::QaMode;
use vwsd_core::scoring::Metric;

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths {
    pub data: PathBuf,
    #[serde(default)]
    pub gold: Option<PathBuf>,
    pub images: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedderConfig {
    Mock {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        url: String,
        space_id: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default)]
        serial: bool,
    },
}

fn default_dim() -> usize {
    64
}

fn default_timeout_secs() -> u64 {
    120
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Mock { seed: 0, dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LlmConfig {
    Mock {
        #[serde(default)]
        seed: u64,
    },
    /// OpenAI-compatible API; the key comes from `OPENAI_API_KEY`.
    Openai {
        model: String,
        #[serde(default)]
        chat: bool,
    },
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig::Mock { seed: 0 }
    }
}

impl LlmConfig {
    pub fn id(&self) -> String {
        match self {
            LlmConfig::Mock { seed } => format!("mock-llm-s{seed}"),
            LlmConfig::Openai { model, .. } => model.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CaptionerConfig {
    Mock {
        #[serde(default)]
        seed: u64,
    },
    Http {
        url: String,
        id: String,
    },
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig::Mock { seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum KbClientConfig {
    /// Hits and images replayed from a fixture file.
    Recorded { fixture: PathBuf },
    Wikimedia {
        #[serde(default = "default_rate")]
        requests_per_second: f64,
        #[serde(default = "default_user_agent")]
        user_agent: String,
        /// Serve only from the HTTP response cache.
        #[serde(default)]
        offline: bool,
    },
}

fn default_rate() -> f64 {
    5.0
}

fn default_user_agent() -> String {
    format!("vwsd/{} (research pipeline)", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbConfig {
    #[serde(default)]
    pub client: Option<KbClientConfig>,
    #[serde(default)]
    pub sources: Vec<KbSource>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub aggregation: KbAggregation,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl Default for KbConfig {
    fn default() -> Self {
        KbConfig {
            client: None,
            sources: Vec::new(),
            k: DEFAULT_K,
            aggregation: KbAggregation::Max,
        }
    }
}

impl KbConfig {
    pub fn enabled(&self) -> bool {
        self.client.is_some() && !self.sources.is_empty()
    }
}

/// Which phrases the per-image penalty averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScope {
    #[default]
    Split,
    TrainTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub scope: PenaltyScope,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            enabled: true,
            alpha: 1.0,
            scope: PenaltyScope::Split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmParamsConfig {
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
}

fn default_max_tokens() -> u32 {
    100
}

impl Default for LlmParamsConfig {
    fn default() -> Self {
        LlmParamsConfig {
            max_tokens: 100,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaConfig {
    /// Include the QA stage in `run`.
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_qa_mode")]
    pub mode: QaMode,
    #[serde(default = "default_qa_tokens")]
    pub max_tokens: u32,
}

fn default_qa_mode() -> QaMode {
    QaMode::ThinkGreedy
}

fn default_qa_tokens() -> u32 {
    256
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            enabled: false,
            mode: QaMode::ThinkGreedy,
            max_tokens: 256,
        }
    }
}

fn default_templates() -> Vec<String> {
    vwsd_core::enhancement::builtin_templates()
        .iter()
        .map(|t| t.name().to_string())
        .collect()
}

fn default_caption_modes() -> Vec<CaptionMode> {
    vec![CaptionMode::Greedy]
}

fn default_families() -> Vec<String> {
    vec!["all".to_string()]
}

fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Evaluation split.
    pub test: SplitPaths,
    /// Training split for the ranker.
    #[serde(default)]
    pub train: Option<SplitPaths>,
    pub cache_root: PathBuf,
    /// Copy of the prediction file.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub captioner: CaptionerConfig,
    #[serde(default)]
    pub kb: KbConfig,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
    #[serde(default = "default_caption_modes")]
    pub caption_modes: Vec<CaptionMode>,
    /// Feature families for the ranker: ids, `prefix*` globs, or `all`.
    #[serde(default = "default_families")]
    pub families: Vec<String>,
    #[serde(default)]
    pub ltr: LtrHyperparams,
    #[serde(default = "default_split_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub llm_params: LlmParamsConfig,
    #[serde(default)]
    pub qa: QaConfig,
    /// System whose rankings `predict` writes: `ltr`, `qa`, or a family id.
    /// Defaults to `ltr` with a training split, else the baseline.
    #[serde(default)]
    pub predict_system: Option<String>,
    /// Seeds the ranker (overrides `ltr.seed`).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub sequential: bool,
}

fn default_metric() -> Metric {
    Metric::Cosine
}

fn default_split_fraction() -> f64 {
    0.2
}

impl PipelineConfig {
    /// Reads the file, applies `key.path=value` overrides, resolves relative
    /// paths against the config file's directory and validates.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        for (key, raw) in overrides {
            set_path(&mut value, key, parse_override(raw))?;
        }
        let mut cfg: PipelineConfig =
            serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.ltr.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for split in std::iter::once(&mut self.test).chain(self.train.as_mut()) {
            fix(&mut split.data);
            fix(&mut split.images);
            if let Some(g) = split.gold.as_mut() {
                fix(g);
            }
        }
        fix(&mut self.cache_root);
        if let Some(o) = self.output.as_mut() {
            fix(o);
        }
        if let Some(KbClientConfig::Recorded { fixture }) = self.kb.client.as_mut() {
            fix(fixture);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for t in &self.templates {
            if find_template(t).is_none() {
                return bad(format!("unknown template `{t}`"));
            }
        }
        if !(self.penalty.alpha.is_finite() && self.penalty.alpha >= 0.0) {
            return bad(format!("penalty alpha must be non-negative, got {}", self.penalty.alpha));
        }
        if self.penalty.scope == PenaltyScope::TrainTest && self.train.is_none() {
            return bad("penalty scope train_test needs a train split".into());
        }
        if let EmbedderConfig::Mock { dim, .. } = self.embedder {
            if dim < 2 {
                return bad("mock embedder dim must be at least 2".into());
            }
        }
        if self.kb.k == 0 {
            return bad("kb.k must be positive".into());
        }
        if !self.kb.sources.is_empty() && self.kb.client.is_none() {
            return bad("kb.sources given without a kb.client".into());
        }
        if self.families.is_empty() {
            return bad("families must not be empty".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be positive".into());
        }
        if self.qa.mode == QaMode::CotFollowup {
            return bad("qa.mode cot_followup is a stage, not a runnable mode".into());
        }
        self.ltr
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn split(&self, name: &str) -> Option<&SplitPaths> {
        match name {
            "test" => Some(&self.test),
            "train" => self.train.as_ref(),
            _ => None,
        }
    }

    /// Split names present in the configuration, training first.
    pub fn split_names(&self) -> Vec<&'static str> {
        if self.train.is_some() {
            vec!["train", "test"]
        } else {
            vec!["test"]
        }
    }

    pub fn predict_system(&self) -> String {
        self.predict_system.clone().unwrap_or_else(|| {
            if self.train.is_some() {
                "ltr".into()
            } else if self.penalty.enabled {
                "baseline+penalty".into()
            } else {
                "baseline".into()
            }
        })
    }

    pub fn exec(&self) -> vwsd_core::Exec {
        if self.sequential {
            vwsd_core::Exec::Sequential
        } else {
            vwsd_core::Exec::default()
        }
    }
}

/// JSON if it parses as JSON, otherwise a string.
fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), PipelineError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| PipelineError::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| PipelineError::Config(format!("override `{key}` does not address an object field")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("config.json");
        fs::write(&p, body).unwrap();
        p
    }

    const MIN: &str = r#"{"test": {"data": "d.txt", "gold": "g.txt", "images": "img"}, "cache_root": "cache"}"#;

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::load(&write(dir.path(), MIN), &[]).unwrap();
        assert_eq!(cfg.test.data, dir.path().join("d.txt"));
        assert_eq!(cfg.cache_root, dir.path().join("cache"));
        assert_eq!(cfg.templates.len(), 7);
        assert_eq!(cfg.metric, Metric::Cosine);
        assert!(cfg.penalty.enabled);
        assert_eq!(cfg.ltr, LtrHyperparams::default());
        assert_eq!(cfg.predict_system(), "baseline+penalty");
    }

    #[test]
    fn overrides_apply_before_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), MIN);
        let cfg = PipelineConfig::load(
            &path,
            &[
                ("metric".into(), "euclidean".into()),
                ("penalty.alpha".into(), "0.5".into()),
                ("ltr.n_estimators".into(), "7".into()),
                ("seed".into(), "9".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.metric, Metric::Euclidean);
        assert_eq!(cfg.penalty.alpha, 0.5);
        assert_eq!(cfg.ltr.n_estimators, 7);
        assert_eq!(cfg.ltr.seed, 9);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), MIN);
        for (k, v) in [
            ("templates", r#"["nope"]"#),
            ("metric", "hamming"),
            ("penalty.alpha", "-1"),
            ("unknown_field", "1"),
            ("embedder", r#"{"kind": "quantum"}"#),
            ("kb.sources", r#"["wikipedia"]"#),
        ] {
            let err = PipelineConfig::load(&path, &[(k.into(), v.into())]).unwrap_err();
            assert!(matches!(err, PipelineError::Config(_)), "{k}: {err}");
        }
        let err = PipelineConfig::load(&dir.path().join("missing.json"), &[]).unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)));
    }
}
