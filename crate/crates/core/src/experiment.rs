//! Experiment and ablation runs: sample agents, narrate, run chains, parse
//! and score, then write transcripts, predictions and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, Utc};
use chrono_tz::Tz;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{self, Backend, BackendConfig, BackendError, CacheConfig, KeywordRules, MockEvidence, MockOracle};
use crate::category::{Attribute, CategoryConfig, CategoryId};
use crate::chain::{ChainError, ChainStatus, DecodingParams, Orchestrator, StageTranscript, Variant};
use crate::metrics::{AttributeMetrics, ClassUniverse, MetricsError};
use crate::narrative;
use crate::parser::{DemographicPrediction, Label, ResponseParser, SynonymError, SynonymTables};
use crate::synth::{self, GeneratorManifest};
use crate::template::{TemplateError, TemplateSet};
use crate::trajectory::{self, DatasetManifest, DemographicLabel, TrajectoryError, UnresolvedPolicy};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_MD: &str = "ablation.md";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const TRANSCRIPTS_DIR: &str = "transcripts";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Synonyms(#[from] SynonymError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("no agents to evaluate: {0}")]
    NoAgents(String),
    #[error("backend unavailable: {failures} consecutive chain failures, last error: {last_error}")]
    BackendDead { failures: usize, last_error: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid run config: {0}")]
    Config(String),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub stay_points: PathBuf,
    pub pois: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl DatasetPaths {
    /// The file names written by the synthetic generator, under `dir`. The
    /// manifest is only used when present.
    pub fn in_dir(dir: &Path) -> Self {
        let manifest = dir.join(synth::MANIFEST_FILE);
        DatasetPaths {
            stay_points: dir.join(synth::STAY_POINTS_FILE),
            pois: dir.join(synth::POIS_FILE),
            labels: dir.join(synth::LABELS_FILE),
            manifest: manifest.exists().then_some(manifest),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Deterministic keyword oracle. `rules` is a keyword-rule JSON file or
    /// a synthetic `generator.json`; the bundled planted rules otherwise.
    Mock {
        #[serde(default)]
        evidence: MockEvidence,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules: Option<PathBuf>,
    },
    /// OpenAI-compatible chat-completion server.
    Live {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config_path: Option<PathBuf>,
        #[serde(default)]
        config: BackendConfig,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Mock {
            evidence: MockEvidence::default(),
            rules: None,
        }
    }
}

impl BackendSpec {
    pub fn decoding(&self) -> DecodingParams {
        match self {
            BackendSpec::Mock { .. } => DecodingParams::default(),
            BackendSpec::Live { config, .. } => DecodingParams {
                model: config.model.clone(),
                temperature: config.temperature,
                max_tokens: config.max_tokens,
            },
        }
    }

    /// Short id for reports, e.g. `mock-oracle` or `openai:mistral-7b-instruct`.
    pub fn id(&self) -> String {
        match self {
            BackendSpec::Mock { .. } => "mock-oracle".into(),
            BackendSpec::Live { config, .. } => format!("openai:{}", config.model),
        }
    }
}

/// Everything that determines the content of a run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetPaths,
    pub backend: BackendSpec,
    pub attributes: Vec<Attribute>,
    pub variant: Variant,
    /// Agents to sample; all eligible agents when `None`.
    pub sample: Option<usize>,
    pub seed: u64,
    /// Narrative budget in characters.
    pub budget_chars: usize,
    pub templates_dir: Option<PathBuf>,
    pub synonyms_dir: Option<PathBuf>,
    pub include_narrative_in_s3: bool,
    pub class_universe: ClassUniverse,
    pub unresolved_pois: UnresolvedPolicy,
    /// Abort once this many chains in a row fail at the backend.
    pub max_consecutive_failures: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetPaths::in_dir(Path::new("data")),
            backend: BackendSpec::default(),
            attributes: vec![Attribute::Income],
            variant: Variant::Full,
            sample: None,
            seed: 0,
            budget_chars: 16_000,
            templates_dir: None,
            synonyms_dir: None,
            include_narrative_in_s3: false,
            class_universe: ClassUniverse::default(),
            unresolved_pois: UnresolvedPolicy::default(),
            max_consecutive_failures: 20,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(ExperimentError::Config("no attributes selected".into()));
        }
        if self.sample == Some(0) {
            return Err(ExperimentError::Config("sample size must be at least 1".into()));
        }
        if self.budget_chars == 0 {
            return Err(ExperimentError::Config("narrative budget must be positive".into()));
        }
        if let BackendSpec::Live { config, .. } = &self.backend {
            config.validate()?;
        }
        Ok(())
    }

    /// Copy with execution-only settings (cache, parallelism) reset, as
    /// recorded in reports and transcripts.
    pub fn provenance(&self) -> RunConfig {
        let mut out = self.clone();
        if let BackendSpec::Live { config, .. } = &mut out.backend {
            let defaults = BackendConfig::default();
            config.cache = defaults.cache;
            config.parallelism = defaults.parallelism;
        }
        out
    }
}

/// How a run executes; none of this changes its results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecOptions {
    /// Output directory; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub parallelism: usize,
    pub cache: CacheConfig,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            out_dir: None,
            parallelism: 4,
            cache: CacheConfig::default(),
        }
    }
}

/// Builds the configured backend wrapped in the requested cache mode.
pub fn build_backend(config: &RunConfig, exec: &ExecOptions) -> Result<Arc<dyn Backend>> {
    let categories = match &config.dataset.manifest {
        Some(path) => DatasetManifest::load(path)?.categories()?,
        None => CategoryConfig::default(),
    };
    let spec = config.backend.clone();
    let live = move || -> Result<Arc<dyn Backend>, BackendError> {
        match spec {
            BackendSpec::Mock { evidence, rules } => {
                let oracle = match rules {
                    Some(path) => MockOracle::new(load_keyword_rules(&path)?, categories),
                    None => MockOracle::planted(categories),
                };
                Ok(Arc::new(oracle.with_evidence(evidence)))
            }
            BackendSpec::Live { config, .. } => Ok(Arc::new(backend::OpenAiClient::new(&config)?)),
        }
    };
    Ok(backend::with_cache(&exec.cache, live)?)
}

fn load_keyword_rules(path: &Path) -> Result<KeywordRules, BackendError> {
    let text = std::fs::read_to_string(path).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    if let Ok(rules) = serde_json::from_str::<KeywordRules>(&text) {
        return Ok(rules);
    }
    serde_json::from_str::<GeneratorManifest>(&text)
        .map(|g| g.rules.keyword_rules())
        .map_err(|e| BackendError::Config(format!("{}: not a keyword-rule or generator file: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativeFailure {
    pub agent_id: String,
    pub error: String,
}

/// Loaded data, the agent sample and its narratives.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub categories: CategoryConfig,
    pub timezone: Tz,
    pub dataset_hash: String,
    pub sampled: Vec<String>,
    /// Narrative text per agent whose narrative could be built.
    pub narratives: BTreeMap<String, String>,
    pub narrative_failures: Vec<NarrativeFailure>,
    pub labels: BTreeMap<String, DemographicLabel>,
}

/// sha256 over the per-file sha256 digests of the dataset files.
pub fn dataset_hash(paths: &DatasetPaths) -> Result<String> {
    let mut outer = Sha256::new();
    let mut files = vec![("stay_points", &paths.stay_points), ("pois", &paths.pois), ("labels", &paths.labels)];
    if let Some(m) = &paths.manifest {
        files.push(("manifest", m));
    }
    for (name, path) in files {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        outer.update(format!("{name}:{}\n", hex::encode(Sha256::digest(&bytes))));
    }
    Ok(hex::encode(outer.finalize()))
}

pub fn prepare(config: &RunConfig) -> Result<PreparedRun> {
    config.validate()?;
    let manifest = match &config.dataset.manifest {
        Some(path) => DatasetManifest::load(path)?,
        None => DatasetManifest::default(),
    };
    let timezone = manifest.timezone()?;
    let categories = manifest.categories()?;
    let vocabulary = manifest.tag_vocabulary();
    let stay_points = trajectory::load_stay_points(&config.dataset.stay_points)?;
    let catalog = trajectory::load_poi_catalog(&config.dataset.pois, vocabulary.as_ref())?;
    let labels = trajectory::load_labels(&config.dataset.labels, &categories)?;
    let joined = trajectory::join_visits(&stay_points, &catalog, config.unresolved_pois)?;

    let labels: BTreeMap<String, DemographicLabel> = labels.into_iter().map(|l| (l.agent_id.clone(), l)).collect();
    let eligible: Vec<String> = joined
        .by_agent
        .keys()
        .filter(|a| labels.contains_key(*a))
        .cloned()
        .collect();
    let unlabeled = joined.by_agent.len() - eligible.len();
    if unlabeled > 0 {
        tracing::info!(unlabeled, "agents with visits but no label are not evaluated");
    }
    if eligible.is_empty() {
        return Err(ExperimentError::NoAgents("no labeled agent has any visit".into()));
    }
    let n = config.sample.unwrap_or(eligible.len());
    let sampled = trajectory::sample_agents(&eligible, n, config.seed)?;

    let mut narratives = BTreeMap::new();
    let mut narrative_failures = Vec::new();
    for agent in &sampled {
        let weeks = trajectory::partition_weeks(agent, &joined.by_agent[agent], &timezone);
        match narrative::build_narrative(&weeks, &timezone, config.budget_chars) {
            Ok(weekly) => {
                narratives.insert(agent.clone(), narrative::narrative_text(&weekly));
            }
            Err(e) => {
                tracing::warn!(agent = %agent, error = %e, "narrative construction failed");
                narrative_failures.push(NarrativeFailure {
                    agent_id: agent.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if narratives.is_empty() {
        return Err(ExperimentError::NoAgents(format!(
            "narratives failed for all {} sampled agents",
            sampled.len()
        )));
    }
    Ok(PreparedRun {
        categories,
        timezone,
        dataset_hash: dataset_hash(&config.dataset)?,
        sampled,
        narratives,
        narrative_failures,
        labels,
    })
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub variant: Variant,
    pub truth: CategoryId,
    pub chain_failed: bool,
    #[serde(flatten)]
    pub prediction: DemographicPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub generated_at: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub backend: String,
    pub model: String,
    pub variant: Variant,
    pub dataset_hash: String,
    pub sampler_version: String,
    pub sampled_agents: Vec<String>,
    pub template_ids: BTreeMap<String, String>,
    pub narrative_failures: Vec<NarrativeFailure>,
    pub attributes: BTreeMap<Attribute, AttributeMetrics>,
}

impl EvalReport {
    /// The report with its timestamp blanked, for run-to-run comparison.
    pub fn without_timestamp(&self) -> EvalReport {
        EvalReport {
            generated_at: String::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self, categories: &CategoryConfig) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Evaluation report\n");
        let _ = writeln!(md, "- Backend: `{}` (model `{}`)", self.backend, self.model);
        let _ = writeln!(md, "- Variant: {}", self.variant.label());
        let _ = writeln!(md, "- Agents sampled: {} (seed {})", self.sampled_agents.len(), self.config.seed);
        let _ = writeln!(md, "- Dataset hash: `{}`", self.dataset_hash);
        let _ = writeln!(md, "- Generated: {}\n", self.generated_at);

        let _ = writeln!(md, "| Model | Age Acc. | Age F1 | Income Acc. | Income F1 | Education Acc. | Education F1 |");
        let _ = writeln!(md, "|---|---|---|---|---|---|---|");
        let mut row = format!("| {} ({}) |", self.model, self.variant.label());
        for attribute in Attribute::ALL {
            match self.attributes.get(&attribute) {
                Some(m) => {
                    let _ = write!(row, " {:.4} | {:.4} |", m.accuracy, m.macro_f1);
                }
                None => row.push_str(" - | - |"),
            }
        }
        let _ = writeln!(md, "{row}\n");

        for (attribute, m) in &self.attributes {
            let set = categories.get(*attribute);
            let name = |id: &CategoryId| set.get(id).map_or_else(|| id.to_string(), |c| c.name.clone());
            let _ = writeln!(md, "## {attribute}\n");
            let _ = writeln!(
                md,
                "n = {}, parse status: {} clean, {} repaired, {} unparsed (failure rate {:.4}), chain failures: {}\n",
                m.n, m.parse_status.clean, m.parse_status.repaired, m.parse_status.unparsed, m.parse_failure_rate, m.chain_failures
            );
            let _ = writeln!(md, "| Class | Precision | Recall | F1 | Support |");
            let _ = writeln!(md, "|---|---|---|---|---|");
            for c in &m.per_class {
                let _ = writeln!(
                    md,
                    "| {} | {:.4} | {:.4} | {:.4} | {} |",
                    name(&c.class),
                    c.precision,
                    c.recall,
                    c.f1,
                    c.support
                );
            }
            let _ = writeln!(md, "\nConfusion matrix (rows: truth, columns: prediction)\n");
            let header: Vec<String> = m.confusion.classes.iter().map(name).collect();
            let _ = writeln!(md, "| | {} | Unparsed |", header.join(" | "));
            let _ = writeln!(md, "|---|{}---|", "---|".repeat(header.len()));
            for (i, counts) in m.confusion.counts.iter().enumerate() {
                let cells: Vec<String> = counts.iter().map(u64::to_string).collect();
                let _ = writeln!(md, "| {} | {} |", header[i], cells.join(" | "));
            }
            md.push('\n');
        }
        if !self.narrative_failures.is_empty() {
            let _ = writeln!(md, "## Narrative failures\n");
            for f in &self.narrative_failures {
                let _ = writeln!(md, "- `{}`: {}", f.agent_id, f.error);
            }
        }
        md
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// File-name-safe form of an agent id.
pub fn file_stem(agent_id: &str) -> String {
    agent_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

pub fn transcript_path(out_dir: &Path, attribute: Attribute, variant: Variant, agent_id: &str) -> PathBuf {
    out_dir
        .join(TRANSCRIPTS_DIR)
        .join(attribute.as_str())
        .join(variant.as_str())
        .join(format!("{}.json", file_stem(agent_id)))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

struct Task<'a> {
    attribute: Attribute,
    agent_id: &'a str,
    narrative: &'a str,
}

struct TaskResult {
    attribute: Attribute,
    agent_id: String,
    prediction: DemographicPrediction,
    chain_failed: bool,
}

/// Runs one variant over a prepared sample.
pub fn run_prepared(
    config: &RunConfig,
    exec: &ExecOptions,
    prepared: &PreparedRun,
    backend: &dyn Backend,
    variant: Variant,
) -> Result<EvalReport> {
    let templates = match &config.templates_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::defaults(),
    };
    let synonyms = match &config.synonyms_dir {
        Some(dir) => SynonymTables::load_dir(dir)?,
        None => SynonymTables::default(),
    };
    let parser = ResponseParser::new(prepared.categories.clone(), &synonyms);
    let mut orchestrator = Orchestrator::new(templates.clone(), prepared.categories.clone(), config.backend.decoding());
    orchestrator.include_narrative_in_s3 = config.include_narrative_in_s3;
    let provenance = config.provenance();
    let provenance_json = serde_json::to_value(&provenance).expect("config serializes");

    let tasks: Vec<Task<'_>> = config
        .attributes
        .iter()
        .flat_map(|&attribute| {
            prepared.narratives.iter().map(move |(agent_id, narrative)| Task {
                attribute,
                agent_id,
                narrative,
            })
        })
        .collect();

    let consecutive = AtomicUsize::new(0);
    let aborted = AtomicBool::new(false);
    let last_error = Mutex::new(String::new());
    let done = AtomicUsize::new(0);
    let total = tasks.len();

    let run_task = |task: &Task<'_>| -> Result<Option<TaskResult>> {
        if aborted.load(Ordering::SeqCst) {
            return Ok(None);
        }
        let mut transcript: StageTranscript =
            orchestrator.run_chain(task.agent_id, task.narrative, task.attribute, variant, backend)?;
        transcript.run_config = provenance_json.clone();
        if let Some(out) = &exec.out_dir {
            write_json(&transcript_path(out, task.attribute, variant, task.agent_id), &transcript)?;
        }
        let (prediction, chain_failed) = match (&transcript.status, transcript.final_response()) {
            (ChainStatus::Completed, Some(raw)) => {
                consecutive.store(0, Ordering::SeqCst);
                (parser.parse_stage3(task.agent_id, raw, task.attribute), false)
            }
            (status, _) => {
                let error = match status {
                    ChainStatus::Failed { stage, error } => format!("chain failed at stage {stage}: {error}"),
                    ChainStatus::Completed => "chain produced no final response".into(),
                };
                *last_error.lock().expect("error lock") = error.clone();
                let n = consecutive.fetch_add(1, Ordering::SeqCst) + 1;
                if n >= config.max_consecutive_failures.max(1) {
                    aborted.store(true, Ordering::SeqCst);
                }
                (DemographicPrediction::unparsed(task.agent_id, task.attribute, error), true)
            }
        };
        let finished = done.fetch_add(1, Ordering::SeqCst) + 1;
        if finished.is_multiple_of(50) || finished == total {
            tracing::info!(finished, total, %variant, "chains completed");
        }
        Ok(Some(TaskResult {
            attribute: task.attribute,
            agent_id: task.agent_id.to_string(),
            prediction,
            chain_failed,
        }))
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exec.parallelism.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let results: Vec<Result<Option<TaskResult>>> = pool.install(|| tasks.par_iter().map(run_task).collect());

    if aborted.load(Ordering::SeqCst) {
        return Err(ExperimentError::BackendDead {
            failures: consecutive.load(Ordering::SeqCst),
            last_error: last_error.into_inner().expect("error lock"),
        });
    }
    let mut results: Vec<TaskResult> = results.into_iter().filter_map(Result::transpose).collect::<Result<_>>()?;
    results.sort_by(|a, b| a.attribute.cmp(&b.attribute).then_with(|| a.agent_id.cmp(&b.agent_id)));

    let mut records = Vec::with_capacity(results.len());
    let mut attributes = BTreeMap::new();
    for &attribute in &config.attributes {
        let rows: Vec<&TaskResult> = results.iter().filter(|r| r.attribute == attribute).collect();
        let preds: Vec<Label> = rows.iter().map(|r| r.prediction.label.clone()).collect();
        let truths: Vec<CategoryId> = rows
            .iter()
            .map(|r| prepared.labels[&r.agent_id].get(attribute).clone())
            .collect();
        let statuses: Vec<_> = rows.iter().map(|r| r.prediction.parse_status).collect();
        let failures = rows.iter().filter(|r| r.chain_failed).count() as u64;
        let metrics = AttributeMetrics::compute(
            prepared.categories.get(attribute),
            &preds,
            &truths,
            &statuses,
            failures,
            config.class_universe,
        )?;
        attributes.insert(attribute, metrics);
        for (r, truth) in rows.iter().zip(truths) {
            records.push(PredictionRecord {
                variant,
                truth,
                chain_failed: r.chain_failed,
                prediction: r.prediction.clone(),
            });
        }
    }

    let mut template_ids = BTreeMap::new();
    if variant.runs(crate::template::Stage::S1) {
        template_ids.insert("s1".to_string(), templates.s1.template_id());
    }
    if variant.runs(crate::template::Stage::S2) {
        template_ids.insert("s2".to_string(), templates.s2.template_id());
    }
    for &attribute in &config.attributes {
        template_ids.insert(format!("s3_{attribute}"), templates.s3(attribute)?.template_id());
    }

    let report = EvalReport {
        generated_at: now(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: RunConfig { variant, ..provenance },
        backend: config.backend.id(),
        model: config.backend.decoding().model,
        variant,
        dataset_hash: prepared.dataset_hash.clone(),
        sampler_version: trajectory::SAMPLER_VERSION.to_string(),
        sampled_agents: prepared.sampled.clone(),
        template_ids,
        narrative_failures: prepared.narrative_failures.clone(),
        attributes,
    };

    if let Some(out) = &exec.out_dir {
        let path = out.join(PREDICTIONS_FILE);
        let mut lines = String::new();
        for r in &records {
            lines.push_str(&serde_json::to_string(r).map_err(|e| io_err(&path, e))?);
            lines.push('\n');
        }
        write_text(&path, &lines)?;
        write_json(&out.join(RUN_CONFIG_FILE), &report.config)?;
        write_text(&out.join(REPORT_JSON), &(report.to_json() + "\n"))?;
        write_text(&out.join(REPORT_MD), &report.to_markdown(&prepared.categories))?;
    }
    Ok(report)
}

pub fn run_experiment_with_backend(config: &RunConfig, exec: &ExecOptions, backend: &dyn Backend) -> Result<EvalReport> {
    let prepared = prepare(config)?;
    run_prepared(config, exec, &prepared, backend, config.variant)
}

pub fn run_experiment(config: &RunConfig, exec: &ExecOptions) -> Result<EvalReport> {
    let backend = build_backend(config, exec)?;
    run_experiment_with_backend(config, exec, backend.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub template_ids: BTreeMap<String, String>,
    pub attributes: BTreeMap<Attribute, AttributeMetrics>,
}

/// Change of one variant relative to the full chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantDelta {
    pub variant: Variant,
    pub attribute: Attribute,
    pub accuracy_delta: f64,
    pub macro_f1_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub generated_at: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub backend: String,
    pub model: String,
    pub dataset_hash: String,
    pub sampler_version: String,
    pub sampled_agents: Vec<String>,
    pub variants: Vec<VariantResult>,
    pub deltas: Vec<VariantDelta>,
}

impl AblationReport {
    pub fn without_timestamp(&self) -> AblationReport {
        AblationReport {
            generated_at: String::new(),
            ..self.clone()
        }
    }

    pub fn variant(&self, variant: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Ablation report\n");
        let _ = writeln!(md, "- Backend: `{}` (model `{}`)", self.backend, self.model);
        let _ = writeln!(md, "- Agents sampled: {} (seed {})", self.sampled_agents.len(), self.config.seed);
        let _ = writeln!(md, "- Dataset hash: `{}`", self.dataset_hash);
        let _ = writeln!(md, "- Generated: {}\n", self.generated_at);
        for attribute in &self.config.attributes {
            let _ = writeln!(md, "## {attribute}\n");
            let _ = writeln!(md, "| Variant | Acc. | F1 | Δ Acc. | Δ F1 |");
            let _ = writeln!(md, "|---|---|---|---|---|");
            for v in &self.variants {
                let Some(m) = v.attributes.get(attribute) else { continue };
                let delta = self
                    .deltas
                    .iter()
                    .find(|d| d.variant == v.variant && d.attribute == *attribute);
                let (da, df) = delta.map_or(("-".to_string(), "-".to_string()), |d| {
                    (format!("{:+.4}", d.accuracy_delta), format!("{:+.4}", d.macro_f1_delta))
                });
                let _ = writeln!(
                    md,
                    "| {} | {:.4} | {:.4} | {da} | {df} |",
                    v.variant.label(),
                    m.accuracy,
                    m.macro_f1
                );
            }
            md.push('\n');
        }
        md
    }
}

/// Runs the full chain and both single-stage ablations on one shared
/// sample. Each variant's outputs go to `<out>/<variant>/`.
pub fn run_ablation_with_backend(config: &RunConfig, exec: &ExecOptions, backend: &dyn Backend) -> Result<AblationReport> {
    let prepared = prepare(config)?;
    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let sub = ExecOptions {
            out_dir: exec.out_dir.as_ref().map(|d| d.join(variant.as_str())),
            ..exec.clone()
        };
        let report = run_prepared(config, &sub, &prepared, backend, variant)?;
        variants.push(VariantResult {
            variant,
            template_ids: report.template_ids,
            attributes: report.attributes,
        });
    }
    let full = variants[0].attributes.clone();
    let mut deltas = Vec::new();
    for v in &variants[1..] {
        for (attribute, m) in &v.attributes {
            let base = &full[attribute];
            deltas.push(VariantDelta {
                variant: v.variant,
                attribute: *attribute,
                accuracy_delta: m.accuracy - base.accuracy,
                macro_f1_delta: m.macro_f1 - base.macro_f1,
            });
        }
    }
    let provenance = config.provenance();
    let report = AblationReport {
        generated_at: now(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        backend: config.backend.id(),
        model: config.backend.decoding().model,
        config: RunConfig {
            variant: Variant::Full,
            ..provenance
        },
        dataset_hash: prepared.dataset_hash.clone(),
        sampler_version: trajectory::SAMPLER_VERSION.to_string(),
        sampled_agents: prepared.sampled.clone(),
        variants,
        deltas,
    };
    if let Some(out) = &exec.out_dir {
        write_json(&out.join(RUN_CONFIG_FILE), &report.config)?;
        write_text(
            &out.join(ABLATION_JSON),
            &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
        )?;
        write_text(&out.join(ABLATION_MD), &report.to_markdown())?;
    }
    Ok(report)
}

pub fn run_ablation(config: &RunConfig, exec: &ExecOptions) -> Result<AblationReport> {
    let backend = build_backend(config, exec)?;
    run_ablation_with_backend(config, exec, backend.as_ref())
}

/// Recomputes metrics from a `predictions.jsonl` file.
pub fn evaluate_predictions(
    path: &Path,
    categories: &CategoryConfig,
    universe: ClassUniverse,
) -> Result<BTreeMap<(Attribute, Variant), AttributeMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut groups: BTreeMap<(Attribute, Variant), Vec<PredictionRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord =
            serde_json::from_str(line).map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))?;
        groups
            .entry((record.prediction.attribute, record.variant))
            .or_default()
            .push(record);
    }
    let mut out = BTreeMap::new();
    for (key, rows) in groups {
        let preds: Vec<Label> = rows.iter().map(|r| r.prediction.label.clone()).collect();
        let truths: Vec<CategoryId> = rows.iter().map(|r| r.truth.clone()).collect();
        let statuses: Vec<_> = rows.iter().map(|r| r.prediction.parse_status).collect();
        let failures = rows.iter().filter(|r| r.chain_failed).count() as u64;
        let m = AttributeMetrics::compute(categories.get(key.0), &preds, &truths, &statuses, failures, universe)?;
        out.insert(key, m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, GeneratorConfig, PlantedRules};

    fn dataset(n: usize) -> (tempfile::TempDir, RunConfig) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            n,
            ..GeneratorConfig::default()
        };
        generate(&cfg, &PlantedRules::default())
            .unwrap()
            .write_to(dir.path())
            .unwrap();
        let config = RunConfig {
            dataset: DatasetPaths::in_dir(dir.path()),
            seed: 3,
            ..RunConfig::default()
        };
        (dir, config)
    }

    #[test]
    fn small_mock_run_recovers_income() {
        let (_dir, config) = dataset(12);
        let report = run_experiment(&config, &ExecOptions::default()).unwrap();
        let income = &report.attributes[&Attribute::Income];
        assert_eq!(income.n, 12);
        assert_eq!(income.accuracy, 1.0);
        assert_eq!(income.parse_failure_rate, 0.0);
        assert_eq!(report.sampled_agents.len(), 12);
    }

    #[test]
    fn sample_larger_than_population_errors() {
        let (_dir, mut config) = dataset(3);
        config.sample = Some(5);
        assert!(matches!(
            run_experiment(&config, &ExecOptions::default()),
            Err(ExperimentError::Trajectory(TrajectoryError::SampleTooLarge { .. }))
        ));
        config.sample = Some(0);
        assert!(matches!(run_experiment(&config, &ExecOptions::default()), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn dead_backend_aborts() {
        let (_dir, mut config) = dataset(6);
        config.max_consecutive_failures = 3;
        let guard = backend::NetworkGuard::new();
        let exec = ExecOptions {
            parallelism: 1,
            ..ExecOptions::default()
        };
        match run_experiment_with_backend(&config, &exec, &guard) {
            Err(ExperimentError::BackendDead { failures, .. }) => assert!(failures >= 3),
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn failed_chains_score_as_unparsed() {
        let (_dir, mut config) = dataset(4);
        config.max_consecutive_failures = 100;
        let guard = backend::NetworkGuard::new();
        let report = run_experiment_with_backend(&config, &ExecOptions::default(), &guard).unwrap();
        let m = &report.attributes[&Attribute::Income];
        assert_eq!(m.n, 4);
        assert_eq!(m.chain_failures, 4);
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.parse_failure_rate, 1.0);
    }

    #[test]
    fn outputs_are_written() {
        let (dir, config) = dataset(3);
        let out = dir.path().join("out");
        let exec = ExecOptions {
            out_dir: Some(out.clone()),
            ..ExecOptions::default()
        };
        let report = run_experiment(&config, &exec).unwrap();
        for f in [REPORT_JSON, REPORT_MD, PREDICTIONS_FILE, RUN_CONFIG_FILE] {
            assert!(out.join(f).exists(), "{f}");
        }
        for agent in &report.sampled_agents {
            assert!(transcript_path(&out, Attribute::Income, Variant::Full, agent).exists());
        }
        let again = evaluate_predictions(&out.join(PREDICTIONS_FILE), &CategoryConfig::default(), ClassUniverse::Observed)
            .unwrap();
        assert_eq!(again[&(Attribute::Income, Variant::Full)], report.attributes[&Attribute::Income]);
        let saved: RunConfig =
            serde_json::from_str(&std::fs::read_to_string(out.join(RUN_CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!(saved, report.config);
    }

    #[test]
    fn ablation_lists_three_variants() {
        let (_dir, config) = dataset(6);
        let report = run_ablation(&config, &ExecOptions::default()).unwrap();
        let variants: Vec<_> = report.variants.iter().map(|v| v.variant).collect();
        assert_eq!(variants, Variant::ALL.to_vec());
        assert_eq!(report.deltas.len(), 2);
    }

    #[test]
    fn run_config_toml_round_trip() {
        let text = r#"
            attributes = ["income", "age"]
            variant = "no_s1"
            sample = 50
            seed = 9

            [dataset]
            stay_points = "d/stay_points.csv"
            pois = "d/pois.csv"
            labels = "d/labels.csv"

            [backend]
            kind = "live"
            [backend.config]
            endpoint = "http://localhost:9000"
            model = "m"
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.variant, Variant::NoS1);
        assert_eq!(cfg.attributes, vec![Attribute::Income, Attribute::Age]);
        assert_eq!(cfg.backend.id(), "openai:m");
        assert_eq!(cfg.budget_chars, 16_000);
    }
}
