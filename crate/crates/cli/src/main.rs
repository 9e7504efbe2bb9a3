use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use trajdemo::backend::{BackendConfig, CacheConfig, CacheMode, MockEvidence};
use trajdemo::chain::Variant;
use trajdemo::experiment::{
    self, BackendSpec, DatasetPaths, ExecOptions, RunConfig, RUN_CONFIG_FILE,
};
use trajdemo::metrics::ClassUniverse;
use trajdemo::narrative;
use trajdemo::synth::{self, GeneratorConfig, PlantedRules};
use trajdemo::trajectory::{self, DatasetManifest, UnresolvedPolicy};
use trajdemo::Attribute;

#[derive(Parser)]
#[command(name = "trajdemo", version, about = "Demographic inference from stay-point trajectories")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a dataset, printing a summary.
    Ingest(IngestArgs),
    /// Write per-agent narratives and their statistics.
    Narrate(NarrateArgs),
    /// Run the reasoning chain and score predictions.
    Infer(InferArgs),
    /// Recompute metrics from a predictions file.
    Eval(EvalArgs),
    /// Run the full chain and both single-stage ablations on one sample.
    Ablate(AblateArgs),
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Re-run a saved run configuration from a response cache, offline.
    Replay(ReplayArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Directory holding stay_points.csv, pois.csv, labels.csv and manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    stay_points: Option<PathBuf>,
    #[arg(long)]
    pois: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl DataArgs {
    fn given(&self) -> bool {
        self.data.is_some() || self.stay_points.is_some() || self.pois.is_some() || self.labels.is_some()
    }

    /// Applies these flags over `base`.
    fn resolve(&self, base: Option<DatasetPaths>) -> Option<DatasetPaths> {
        let mut paths = match (&self.data, base) {
            (Some(dir), _) => DatasetPaths::in_dir(dir),
            (None, Some(b)) => b,
            (None, None) => {
                return match (&self.stay_points, &self.pois, &self.labels) {
                    (Some(s), Some(p), Some(l)) => Some(DatasetPaths {
                        stay_points: s.clone(),
                        pois: p.clone(),
                        labels: l.clone(),
                        manifest: self.manifest.clone(),
                    }),
                    _ => None,
                }
            }
        };
        if let Some(s) = &self.stay_points {
            paths.stay_points = s.clone();
        }
        if let Some(p) = &self.pois {
            paths.pois = p.clone();
        }
        if let Some(l) = &self.labels {
            paths.labels = l.clone();
        }
        if let Some(m) = &self.manifest {
            paths.manifest = Some(m.clone());
        }
        Some(paths)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Drop stay points whose POI is unknown instead of failing.
    #[arg(long)]
    skip_unresolved: bool,
    /// Also write the summary to <out>/ingest_summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NarrateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Agents to narrate; all agents when omitted.
    #[arg(long = "agent")]
    agents: Vec<String>,
    /// Narrate a seeded sample of this many agents instead.
    #[arg(long, conflicts_with = "agents")]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Narrative budget in characters.
    #[arg(long, default_value_t = 16_000)]
    budget: usize,
    #[arg(long)]
    skip_unresolved: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvidenceArg {
    /// Stage 3 rule reads the Stage 1 and Stage 2 analyses.
    Both,
    /// Stage 3 rule reads only the Stage 1 analysis.
    Stage1Only,
}

#[derive(Clone, Copy, ValueEnum)]
enum UniverseArg {
    Observed,
    Canonical,
}

impl From<UniverseArg> for ClassUniverse {
    fn from(u: UniverseArg) -> Self {
        match u {
            UniverseArg::Observed => ClassUniverse::Observed,
            UniverseArg::Canonical => ClassUniverse::Canonical,
        }
    }
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run configuration (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attribute to infer; repeatable. `all` selects age, income and education.
    #[arg(long = "attribute")]
    attributes: Vec<String>,
    /// Backend configuration (TOML) for an OpenAI-compatible server.
    #[arg(long, conflicts_with = "mock")]
    backend: Option<PathBuf>,
    /// Use the deterministic keyword oracle instead of a model.
    #[arg(long)]
    mock: bool,
    #[arg(long, value_enum, requires = "mock")]
    mock_evidence: Option<EvidenceArg>,
    /// Keyword-rule JSON or generator.json for the oracle.
    #[arg(long, requires = "mock")]
    mock_rules: Option<PathBuf>,
    /// Record responses to this cache (hits are served, misses appended).
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Serve responses only from this cache; no backend is contacted.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum chains in flight.
    #[arg(long)]
    parallel: Option<usize>,
    /// Narrative budget in characters.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Append the narrative to the Stage 3 prompt.
    #[arg(long)]
    narrative_in_s3: bool,
    #[arg(long, value_enum)]
    universe: Option<UniverseArg>,
    #[arg(long)]
    skip_unresolved: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// predictions.jsonl written by `infer` or `ablate`.
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset manifest, for custom age or education categories.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "observed")]
    universe: UniverseArg,
    /// Write eval.json here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Separability in [0, 1]; 1 keeps bracket venue sets disjoint.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 2)]
    weeks: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Output directory of a previous run (holds run_config.json).
    #[arg(long)]
    run: PathBuf,
    /// Response cache recorded by the previous run.
    #[arg(long)]
    cache: PathBuf,
    /// Re-run as an ablation.
    #[arg(long)]
    ablation: bool,
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn usage_error(message: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::MissingRequiredArgument, message)
        .exit()
}

fn parse_attributes(values: &[String]) -> Result<Vec<Attribute>> {
    let mut out = Vec::new();
    for v in values {
        for part in v.split(',') {
            let part = part.trim();
            if part.eq_ignore_ascii_case("all") {
                out.extend(Attribute::ALL);
            } else {
                out.push(part.parse::<Attribute>()?);
            }
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Merges the config file and flags. Returns the run config and execution
/// options.
fn build_run(args: &RunArgs, variant: Option<Variant>) -> Result<(RunConfig, ExecOptions)> {
    let (mut config, file_has_dataset, file_has_backend) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let config = RunConfig::from_toml(&text)?;
            (config, table.contains_key("dataset"), table.contains_key("backend"))
        }
        None => (RunConfig::default(), false, false),
    };

    let base = file_has_dataset.then(|| config.dataset.clone());
    match args.data.resolve(base) {
        Some(paths) => config.dataset = paths,
        None if args.data.given() => usage_error("give --data DIR or all of --stay-points, --pois and --labels"),
        None => usage_error("no dataset: pass --data DIR, explicit file paths, or a --config with [dataset]"),
    }

    let mut live_config: Option<BackendConfig> = None;
    if args.mock {
        let evidence = match args.mock_evidence {
            Some(EvidenceArg::Stage1Only) => MockEvidence::Stage1Only,
            _ => MockEvidence::Stage1AndStage2,
        };
        config.backend = BackendSpec::Mock {
            evidence,
            rules: args.mock_rules.clone(),
        };
    } else if let Some(path) = &args.backend {
        let cfg = BackendConfig::load(path)?;
        live_config = Some(cfg.clone());
        config.backend = BackendSpec::Live {
            config_path: Some(path.clone()),
            config: cfg,
        };
    } else if !file_has_backend {
        usage_error("choose a backend: --mock or --backend <config.toml>");
    } else if let BackendSpec::Live { config: cfg, .. } = &config.backend {
        live_config = Some(cfg.clone());
    }

    if !args.attributes.is_empty() {
        config.attributes = parse_attributes(&args.attributes)?;
    }
    if let Some(v) = variant {
        config.variant = v;
    }
    if let Some(n) = args.sample {
        config.sample = Some(n);
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(b) = args.budget {
        config.budget_chars = b;
    }
    if let Some(t) = &args.templates {
        config.templates_dir = Some(t.clone());
    }
    if let Some(s) = &args.synonyms {
        config.synonyms_dir = Some(s.clone());
    }
    if args.narrative_in_s3 {
        config.include_narrative_in_s3 = true;
    }
    if let Some(u) = args.universe {
        config.class_universe = u.into();
    }
    if args.skip_unresolved {
        config.unresolved_pois = UnresolvedPolicy::Skip;
    }

    let cache = if let Some(path) = &args.record {
        CacheConfig {
            mode: CacheMode::Record,
            path: Some(path.clone()),
        }
    } else if let Some(path) = &args.replay {
        CacheConfig {
            mode: CacheMode::ReplayStrict,
            path: Some(path.clone()),
        }
    } else {
        live_config.as_ref().map(|c| c.cache.clone()).unwrap_or_default()
    };
    let parallelism = args
        .parallel
        .or(live_config.as_ref().map(|c| c.parallelism))
        .unwrap_or(4);
    if parallelism == 0 {
        bail!("--parallel must be at least 1");
    }
    config.validate()?;
    Ok((
        config,
        ExecOptions {
            out_dir: Some(args.out.clone()),
            parallelism,
            cache,
        },
    ))
}

fn print_metrics(attributes: &BTreeMap<Attribute, trajdemo::metrics::AttributeMetrics>, label: &str) {
    for (attribute, m) in attributes {
        println!(
            "{label}{attribute}: accuracy {:.4}, macro-F1 {:.4}, n {}, unparsed {}, chain failures {}",
            m.accuracy, m.macro_f1, m.n, m.parse_status.unparsed, m.chain_failures
        );
    }
}

#[derive(Serialize)]
struct IngestSummary {
    stay_points: usize,
    pois: usize,
    labels: usize,
    agents_with_visits: usize,
    labeled_agents_with_visits: usize,
    agent_weeks: usize,
    skipped_stay_points: usize,
    timezone: String,
}

fn load_manifest(paths: &DatasetPaths) -> Result<DatasetManifest> {
    Ok(match &paths.manifest {
        Some(p) => DatasetManifest::load(p)?,
        None => DatasetManifest::default(),
    })
}

fn policy(skip: bool) -> UnresolvedPolicy {
    if skip {
        UnresolvedPolicy::Skip
    } else {
        UnresolvedPolicy::Error
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    let Some(paths) = args.data.resolve(None) else {
        usage_error("no dataset: pass --data DIR or --stay-points, --pois and --labels");
    };
    let manifest = load_manifest(&paths)?;
    let tz = manifest.timezone()?;
    let categories = manifest.categories()?;
    let stay_points = trajectory::load_stay_points(&paths.stay_points)?;
    let catalog = trajectory::load_poi_catalog(&paths.pois, manifest.tag_vocabulary().as_ref())?;
    let labels = trajectory::load_labels(&paths.labels, &categories)?;
    let joined = trajectory::join_visits(&stay_points, &catalog, policy(args.skip_unresolved))?;
    let weeks: usize = joined
        .by_agent
        .iter()
        .map(|(a, v)| trajectory::partition_weeks(a, v, &tz).len())
        .sum();
    let labeled = labels.iter().filter(|l| joined.by_agent.contains_key(&l.agent_id)).count();
    let summary = IngestSummary {
        stay_points: stay_points.len(),
        pois: catalog.len(),
        labels: labels.len(),
        agents_with_visits: joined.by_agent.len(),
        labeled_agents_with_visits: labeled,
        agent_weeks: weeks,
        skipped_stay_points: joined.skipped,
        timezone: manifest.timezone.clone(),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("ingest_summary.json"), format!("{json}\n"))?;
    }
    println!("{json}");
    Ok(())
}

fn narrate(args: NarrateArgs) -> Result<()> {
    let Some(paths) = args.data.resolve(None) else {
        usage_error("no dataset: pass --data DIR or --stay-points, --pois and --labels");
    };
    let manifest = load_manifest(&paths)?;
    let tz = manifest.timezone()?;
    let stay_points = trajectory::load_stay_points(&paths.stay_points)?;
    let catalog = trajectory::load_poi_catalog(&paths.pois, manifest.tag_vocabulary().as_ref())?;
    let joined = trajectory::join_visits(&stay_points, &catalog, policy(args.skip_unresolved))?;

    let all: Vec<String> = joined.by_agent.keys().cloned().collect();
    let agents = if !args.agents.is_empty() {
        for a in &args.agents {
            if !joined.by_agent.contains_key(a) {
                bail!("agent `{a}` has no visits");
            }
        }
        args.agents.clone()
    } else if let Some(n) = args.sample {
        trajectory::sample_agents(&all, n, args.seed)?
    } else {
        all
    };

    std::fs::create_dir_all(&args.out)?;
    for agent in &agents {
        let weeks = trajectory::partition_weeks(agent, &joined.by_agent[agent], &tz);
        let weekly = narrative::build_narrative(&weeks, &tz, args.budget)
            .with_context(|| format!("narrating agent `{agent}`"))?;
        let stem = experiment::file_stem(agent);
        std::fs::write(
            args.out.join(format!("{stem}.narrative.txt")),
            narrative::narrative_text(&weekly) + "\n",
        )?;
        std::fs::write(
            args.out.join(format!("{stem}.stats.json")),
            serde_json::to_string_pretty(&weekly)? + "\n",
        )?;
    }
    println!("wrote {} narratives to {}", agents.len(), args.out.display());
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let (config, exec) = build_run(&args.run, args.variant)?;
    let report = experiment::run_experiment(&config, &exec)?;
    print_metrics(&report.attributes, "");
    println!("report: {}", exec.out_dir.unwrap_or_default().join(experiment::REPORT_JSON).display());
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let (config, exec) = build_run(&args.run, None)?;
    let report = experiment::run_ablation(&config, &exec)?;
    for v in &report.variants {
        print_metrics(&v.attributes, &format!("{} ", v.variant.label()));
    }
    println!("report: {}", exec.out_dir.unwrap_or_default().join(experiment::ABLATION_JSON).display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let categories = match &args.manifest {
        Some(p) => DatasetManifest::load(p)?.categories()?,
        None => trajdemo::CategoryConfig::default(),
    };
    let results = experiment::evaluate_predictions(&args.predictions, &categories, args.universe.into())?;
    let mut table: BTreeMap<String, BTreeMap<String, _>> = BTreeMap::new();
    for ((attribute, variant), m) in &results {
        table
            .entry(variant.to_string())
            .or_default()
            .insert(attribute.to_string(), m);
    }
    let json = serde_json::to_string_pretty(&table)?;
    match args.out {
        Some(out) => {
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("eval.json"), format!("{json}\n"))?;
            for ((attribute, variant), m) in &results {
                println!(
                    "{} {attribute}: accuracy {:.4}, macro-F1 {:.4}, n {}",
                    variant.label(),
                    m.accuracy,
                    m.macro_f1,
                    m.n
                );
            }
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let config = GeneratorConfig {
        n: args.n,
        seed: args.seed,
        sigma: args.sigma,
        weeks: args.weeks,
        ..GeneratorConfig::default()
    };
    let data = synth::generate(&config, &PlantedRules::default())?;
    data.write_to(&args.out)?;
    println!(
        "wrote {} agents, {} stay points to {}",
        data.labels.len(),
        data.stay_points.len(),
        args.out.display()
    );
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let path = args.run.join(RUN_CONFIG_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let config: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let exec = ExecOptions {
        out_dir: Some(args.out.clone()),
        parallelism: args.parallel.unwrap_or(4).max(1),
        cache: CacheConfig {
            mode: CacheMode::ReplayStrict,
            path: Some(args.cache.clone()),
        },
    };
    if args.ablation {
        let report = experiment::run_ablation(&config, &exec)?;
        for v in &report.variants {
            print_metrics(&v.attributes, &format!("{} ", v.variant.label()));
        }
    } else {
        let report = experiment::run_experiment(&config, &exec)?;
        print_metrics(&report.attributes, "");
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use trajdemo::experiment::ExperimentError as E;
    match e.downcast_ref::<E>() {
        Some(E::Trajectory(_)) => "dataset",
        Some(E::Template(_)) => "template",
        Some(E::Synonyms(_)) => "synonyms",
        Some(E::Backend(_)) | Some(E::BackendDead { .. }) => "backend",
        Some(E::Metrics(_)) => "metrics",
        Some(E::Chain(_)) => "chain",
        Some(E::NoAgents(_)) => "no_agents",
        Some(E::Io { .. }) => "io",
        Some(E::Config(_)) => "config",
        None => "runtime",
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Narrate(a) => narrate(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Replay(a) => replay(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": format!("{e:#}"),
                "kind": error_kind(&e),
            });
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
