pub mod backends;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use backends::{BackendSource, ConfiguredBackends, CountingMocks, FixedBackends};
pub use config::PipelineConfig;
pub use error::PipelineError;
pub use pipeline::{Pipeline, Stage, StageReport, StageStatus};

#[derive(Debug, Parser)]
#[command(name = "vwsd", version, about = "Visual word sense disambiguation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the splits.
    Prepare,
    /// Enhance phrases with the configured prompt templates.
    Enhance,
    /// Caption every candidate image.
    Caption,
    /// Fetch knowledge-base reference images.
    KbFetch,
    /// Embed phrases, enhanced phrases, captions and images.
    Embed,
    /// Score candidates for every feature family.
    Score,
    /// Assemble ranker feature matrices.
    Features,
    /// Train the learning-to-rank model.
    TrainLtr,
    /// Write the prediction file.
    Predict,
    /// Report accuracy and MRR.
    Evaluate {
        /// Score this prediction file instead of the pipeline's systems.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Answer each sample as a caption multiple-choice question.
    Qa,
    /// Run every stage in order.
    Run,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key.path=value`; the value is parsed as JSON when it can be.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub cache_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Comma-separated family ids, `prefix*` globs, or `all`.
    #[arg(long, global = true)]
    pub families: Option<String>,
    /// Comma-separated template names.
    #[arg(long, global = true)]
    pub templates: Option<String>,
    #[arg(long, global = true)]
    pub metric: Option<String>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub no_penalty: bool,
    #[arg(long, global = true)]
    pub system: Option<String>,
    #[arg(long, global = true)]
    pub qa_mode: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Use the single-threaded execution path.
    #[arg(long, global = true)]
    pub sequential: bool,
}

impl Overrides {
    /// Flags as dotted-path assignments, applied after `--set`.
    pub fn assignments(&self) -> Result<Vec<(String, String)>, PipelineError> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.to_string()));
        }
        let list = |s: &str| {
            let items: Vec<String> = s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
            serde_json::to_string(&items).expect("strings serialize")
        };
        let string = |s: &str| serde_json::to_string(s).expect("string serializes");
        let path = |p: &PathBuf| string(&p.to_string_lossy());
        if let Some(p) = &self.cache_root {
            out.push(("cache_root".into(), path(&absolute(p))));
        }
        if let Some(p) = &self.output {
            out.push(("output".into(), path(&absolute(p))));
        }
        if let Some(f) = &self.families {
            out.push(("families".into(), list(f)));
        }
        if let Some(t) = &self.templates {
            out.push(("templates".into(), list(t)));
        }
        if let Some(m) = &self.metric {
            out.push(("metric".into(), string(m)));
        }
        if let Some(a) = self.alpha {
            out.push(("penalty.alpha".into(), a.to_string()));
        }
        if self.no_penalty {
            out.push(("penalty.enabled".into(), "false".into()));
        }
        if let Some(s) = &self.system {
            out.push(("predict_system".into(), string(s)));
        }
        if let Some(m) = &self.qa_mode {
            out.push(("qa.mode".into(), string(m)));
        }
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(n) = self.parallelism {
            out.push(("parallelism".into(), n.to_string()));
        }
        if self.sequential {
            out.push(("sequential".into(), "true".into()));
        }
        Ok(out)
    }

    pub fn load_config(&self) -> Result<PipelineConfig, PipelineError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| PipelineError::Config("--config is required".into()))?;
        PipelineConfig::load(path, &self.assignments()?)
    }
}

// command-line paths are relative to the working directory, not the config
fn absolute(p: &std::path::Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

/// Executes a parsed command; returns what should be printed on success.
pub fn execute(cli: &Cli, backends: Option<&dyn BackendSource>) -> Result<String, PipelineError> {
    let cfg = cli.overrides.load_config()?;
    let configured;
    let backends: &dyn BackendSource = match backends {
        Some(b) => b,
        None => {
            configured = ConfiguredBackends::new(&cfg);
            &configured
        }
    };
    let pipeline = Pipeline::new(&cfg, backends)?;
    let stage = match &cli.command {
        Command::Prepare => Stage::Prepare,
        Command::Enhance => Stage::Enhance,
        Command::Caption => Stage::Caption,
        Command::KbFetch => Stage::KbFetch,
        Command::Embed => Stage::Embed,
        Command::Score => Stage::Score,
        Command::Features => Stage::Features,
        Command::TrainLtr => Stage::TrainLtr,
        Command::Predict => Stage::Predict,
        Command::Qa => Stage::Qa,
        Command::Evaluate { predictions: Some(p) } => {
            let r = pipeline.evaluate_predictions(p)?;
            return Ok(vwsd_core::evaluation::report(vec![r]).to_text());
        }
        Command::Evaluate { predictions: None } => {
            let status = pipeline.run(Stage::Evaluate)?;
            return Ok(format!("{}\n{}", summary(&[status]), pipeline.report_text()?));
        }
        Command::Run => {
            let reports = pipeline.run_all()?;
            let mut out = summary(&reports);
            if reports.iter().any(|r| r.stage == Stage::Evaluate) {
                out.push('\n');
                out.push_str(&pipeline.report_text()?);
            }
            out.push_str(&format!("predictions: {}\n", pipeline.prediction_path().display()));
            return Ok(out);
        }
    };
    let report = pipeline.run(stage)?;
    Ok(summary(&[report]))
}

fn summary(reports: &[StageReport]) -> String {
    reports
        .iter()
        .map(|r| {
            let status = match r.status {
                StageStatus::Ran => "done",
                StageStatus::UpToDate => "up to date",
            };
            format!("{}: {status}\n", r.stage)
        })
        .collect()
}
