//! Command implementations behind the `reflectsql` binary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use reflectsql::bench::{
    curves_csv, ensure_proxy, first_divergence, load_dataset, proxy_cache_path, run_benchmark, trace_file_name,
    write_report, BenchOptions, BenchReport, CacheStatus, Flavor, ThetaPolicy, Timing,
};
use reflectsql::critic::{CriticMode, FeedbackMode};
use reflectsql::db::DbHandle;
use reflectsql::gateway::{
    Cassette, HttpBackend, HttpConfig, ModelGateway, RecordingGateway, ReplayBackend, Script, ScriptedBackend,
    SharedCassette, API_KEY_ENV,
};
use reflectsql::judges::JudgeMode;
use reflectsql::orchestrator::{solve, write_trace, Ablation, LoopConfig, SolveInput, DEFAULT_BUDGET};
use reflectsql::pipeline::{StagePromptSet, ThetaStore};
use reflectsql::proxy::{content_hash, load_proxy, ContextProxy, DEFAULT_BUDGET_K};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_UNSOLVED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "reflectsql", version, about = "Staged text-to-SQL with stage-level prompt refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build context proxies for databases and cache them.
    BuildContext(BuildContextArgs),
    /// Answer one question against one database.
    Ask(AskArgs),
    /// Run a benchmark and write report.json, curves.csv and traces.
    Bench(BenchArgs),
    /// Rerun a benchmark from a cassette, optionally comparing reports.
    Replay(ReplayArgs),
    /// Summarize one or more report.json files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct BuildContextArgs {
    #[arg(long = "db", required = true)]
    pub dbs: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BUDGET_K)]
    pub budget_k: u32,
    #[arg(long)]
    pub proxy_cache: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Http,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeedbackArg {
    Coarse,
    Granular,
    EpistemicOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    NoCritic,
    NoSemanticChecker,
    SingleShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriticArg {
    Rules,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeArg {
    Stub,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlavorArg {
    Spider,
    Bird,
}

#[derive(Debug, Clone, Args)]
pub struct LoopArgs {
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub budget: u32,
    #[arg(long, value_enum, default_value = "granular")]
    pub feedback: FeedbackArg,
    #[arg(long = "ablation", value_enum)]
    pub ablations: Vec<AblationArg>,
    #[arg(long, value_enum, default_value = "rules")]
    pub critic: CriticArg,
    #[arg(long, value_enum, default_value = "stub")]
    pub judge: JudgeArg,
    /// Skip re-checking solved examples after a prompt commit.
    #[arg(long)]
    pub no_regression_check: bool,
}

impl LoopArgs {
    pub fn config(&self) -> LoopConfig {
        let ablations: BTreeSet<Ablation> = self
            .ablations
            .iter()
            .map(|a| match a {
                AblationArg::NoCritic => Ablation::NoCritic,
                AblationArg::NoSemanticChecker => Ablation::NoSemanticChecker,
                AblationArg::SingleShot => Ablation::SingleShot,
            })
            .collect();
        LoopConfig {
            budget_t: self.budget,
            feedback_mode: match self.feedback {
                FeedbackArg::Coarse => FeedbackMode::Coarse,
                FeedbackArg::Granular => FeedbackMode::Granular,
                FeedbackArg::EpistemicOnly => FeedbackMode::EpistemicOnly,
            },
            ablations,
            critic_mode: match self.critic {
                CriticArg::Rules => CriticMode::Rules,
                CriticArg::Model => CriticMode::Model,
            },
            judge_mode: match self.judge {
                JudgeArg::Stub => JudgeMode::Stub,
                JudgeArg::Model => JudgeMode::Model,
            },
            regression_check: !self.no_regression_check,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    pub backend: Backend,
    /// Model name for the http backend.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value = "https://api.openai.com")]
    pub base_url: String,
    /// Script file for the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Cassette to replay from, or to record into with other backends.
    #[arg(long)]
    pub cassette: Option<PathBuf>,
}

/// A gateway plus the cassette it records into, if any.
pub struct Gateway {
    pub gateway: Box<dyn ModelGateway>,
    pub recording: Option<(SharedCassette, PathBuf)>,
    pub replaying: Option<Arc<Cassette>>,
}

impl Gateway {
    pub fn timing(&self) -> Timing {
        match (&self.recording, &self.replaying) {
            (Some((shared, _)), _) => Timing::Record(shared.clone()),
            (None, Some(c)) => Timing::Replay(c.clone()),
            (None, None) => Timing::Measure,
        }
    }

    /// Saves the recorded cassette, if recording.
    pub fn finish(&self) -> Result<()> {
        if let Some((shared, path)) = &self.recording {
            let cassette = shared.lock().expect("cassette lock");
            cassette.save(path).with_context(|| format!("writing cassette {}", path.display()))?;
            tracing::info!(entries = cassette.len(), path = %path.display(), "cassette saved");
        }
        Ok(())
    }
}

impl BackendArgs {
    pub fn open(&self) -> Result<Gateway> {
        let inner: Box<dyn ModelGateway> = match self.backend {
            Backend::Replay => {
                let path = self.cassette.as_ref().context("--backend replay requires --cassette")?;
                let cassette = Cassette::load(path).with_context(|| format!("reading cassette {}", path.display()))?;
                let shared = Arc::new(cassette.clone());
                return Ok(Gateway { gateway: Box::new(ReplayBackend::new(cassette)), recording: None, replaying: Some(shared) });
            }
            Backend::Scripted => {
                let path = self.script.as_ref().context("--backend scripted requires --script")?;
                let text = fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
                let script = Script::from_json(&text).with_context(|| format!("parsing script {}", path.display()))?;
                Box::new(ScriptedBackend::new(script))
            }
            Backend::Http => {
                let model = self.model.as_ref().context("--backend http requires --model")?;
                let config = HttpConfig::new(&self.base_url, model).with_env_key();
                if config.api_key.is_none() {
                    bail!("--backend http requires credentials in {API_KEY_ENV}");
                }
                Box::new(HttpBackend::new(config)?)
            }
        };
        Ok(match &self.cassette {
            Some(path) => {
                let shared = Cassette::default().into_shared();
                Gateway {
                    gateway: Box::new(RecordingGateway::new(inner, shared.clone())),
                    recording: Some((shared, path.clone())),
                    replaying: None,
                }
            }
            None => Gateway { gateway: inner, recording: None, replaying: None },
        })
    }
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long)]
    pub evidence: Option<String>,
    /// Example id; keys scripted responses and names the trace file.
    #[arg(long, default_value = "ask")]
    pub id: String,
    #[arg(long)]
    pub proxy_cache: Option<PathBuf>,
    /// Build the context proxy when it is missing or stale.
    #[arg(long)]
    pub build_context: bool,
    #[arg(long, default_value_t = DEFAULT_BUDGET_K)]
    pub budget_k: u32,
    #[arg(long)]
    pub theta_store: Option<PathBuf>,
    /// Run directory for the trace.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub loop_args: LoopArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "spider")]
    pub flavor: FlavorArg,
    #[arg(long, default_value_t = DEFAULT_BUDGET_K)]
    pub budget_k: u32,
    #[arg(long)]
    pub proxy_cache: Option<PathBuf>,
    #[arg(long)]
    pub theta_store: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Databases processed in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub loop_args: LoopArgs,
}

impl DatasetArgs {
    fn flavor(&self) -> Flavor {
        match self.flavor {
            FlavorArg::Spider => Flavor::Spider,
            FlavorArg::Bird => Flavor::Bird,
        }
    }

    fn options(&self, timing: Timing) -> BenchOptions {
        BenchOptions {
            budget_k: self.budget_k,
            theta: self.theta_store.clone().map_or(ThetaPolicy::Fresh, ThetaPolicy::Store),
            proxy_cache: self.proxy_cache.clone(),
            jobs: self.jobs.max(1),
            trace_dir: Some(self.out.join("traces")),
            timing,
            ..BenchOptions::new(self.flavor(), self.loop_args.config())
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub cassette: PathBuf,
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// A report to compare against; exits 2 when they differ.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json files or run directories containing one.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

fn load_context(args: &AskArgs, db: &DbHandle) -> Result<ContextProxy> {
    if args.build_context {
        let (proxy, status) = ensure_proxy(db, args.budget_k, args.proxy_cache.as_deref())?;
        tracing::info!(db_id = %db.db_id, ?status, "context proxy ready");
        return Ok(proxy);
    }
    let hint = format!(
        "run `reflectsql build-context --db {} --proxy-cache <dir>` first, or pass --build-context",
        db.path.display()
    );
    let Some(dir) = &args.proxy_cache else {
        bail!("no context proxy for {}: {hint}", db.db_id);
    };
    let path = proxy_cache_path(dir, &db.db_id);
    if !path.is_file() {
        bail!("no context proxy at {}: {hint}", path.display());
    }
    let proxy = load_proxy(&path).with_context(|| format!("loading {}", path.display()))?;
    let bytes = db.bytes()?;
    if proxy.content_hash != content_hash(&bytes, proxy.budget_k) {
        bail!("context proxy at {} does not match the database: {hint}", path.display());
    }
    Ok(proxy)
}

pub fn cmd_build_context(args: &BuildContextArgs) -> Result<i32> {
    let mut failures = 0;
    for path in &args.dbs {
        let db = DbHandle::from_path(path);
        match ensure_proxy(&db, args.budget_k, Some(&args.proxy_cache)) {
            Ok((_, CacheStatus::Reused)) => println!("{}: skipped (hash match)", db.db_id),
            Ok((_, CacheStatus::Built)) => {
                println!("{}: built {}", db.db_id, proxy_cache_path(&args.proxy_cache, &db.db_id).display())
            }
            Err(e) => {
                failures += 1;
                println!("{}: failed: {e}", path.display());
            }
        }
    }
    Ok(if failures > 0 { EXIT_ERROR } else { EXIT_OK })
}

pub fn cmd_ask(args: &AskArgs) -> Result<i32> {
    let db = DbHandle::from_path(&args.db);
    if !db.path.is_file() {
        bail!("database {} does not exist", db.path.display());
    }
    let proxy = load_context(args, &db)?;
    let gateway = args.backend.open()?;
    let store = args.theta_store.as_ref().map(ThetaStore::new);
    let mut theta = match &store {
        Some(s) => s.load_or_default(&db.db_id)?,
        None => StagePromptSet::defaults(&db.db_id),
    };
    let input = SolveInput {
        example_id: &args.id,
        question: &args.question,
        evidence: args.evidence.as_deref(),
        db: &db,
        proxy: &proxy,
    };
    let outcome = solve(&input, &mut theta, &args.loop_args.config(), gateway.gateway.as_ref())?;
    gateway.finish()?;
    if let Some(s) = &store {
        s.save(&theta)?;
    }
    if let Some(out) = &args.out {
        write_trace(&out.join("traces").join(trace_file_name(&args.id)), &outcome)?;
    }
    match &outcome.final_sql {
        Some(sql) => println!("{}", sql.text),
        None => println!("-- no SQL produced"),
    }
    eprintln!(
        "solved: {}  iterations: {}  theta commits: {}{}",
        outcome.solved,
        outcome.iterations_used,
        outcome.theta_commits,
        outcome.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default()
    );
    Ok(if outcome.solved { EXIT_OK } else { EXIT_UNSOLVED })
}

fn bench_with(dataset: &DatasetArgs, gateway: &Gateway) -> Result<BenchReport> {
    let examples = load_dataset(&dataset.dataset, dataset.flavor())?;
    let options = dataset.options(gateway.timing());
    let report = run_benchmark(&dataset.dataset, &examples, &options, gateway.gateway.as_ref())?;
    write_report(&dataset.out, &report)?;
    Ok(report)
}

fn print_summary(report: &BenchReport) {
    print!("{}", curves_csv(report));
    println!("ves,{:.6}", report.ves);
    println!("avg_iterations,{:.6}", report.avg_iterations);
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let gateway = args.backend.open()?;
    let report = bench_with(&args.dataset, &gateway)?;
    gateway.finish()?;
    print_summary(&report);
    Ok(EXIT_OK)
}

fn read_report(path: &Path) -> Result<BenchReport> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<i32> {
    let backend = BackendArgs {
        backend: Backend::Replay,
        model: None,
        base_url: String::new(),
        script: None,
        cassette: Some(args.cassette.clone()),
    };
    let gateway = backend.open()?;
    let report = bench_with(&args.dataset, &gateway)?;
    let Some(baseline) = &args.compare else {
        print_summary(&report);
        return Ok(EXIT_OK);
    };
    let baseline = read_report(baseline)?;
    Ok(match first_divergence(&baseline, &report) {
        None => {
            println!("identical");
            EXIT_OK
        }
        Some(what) => {
            println!("diverged: {what}");
            EXIT_UNSOLVED
        }
    })
}

pub fn cmd_report(args: &ReportArgs) -> Result<i32> {
    println!("report\tflavor\tfeedback\tablations\tT\tEX@0\tEX@final\tVES\tavg_iters\tcommits");
    for path in &args.reports {
        let r = read_report(path)?;
        let first = r.ex_at_t.values().next().copied().unwrap_or(0.0);
        let last = r.ex_at_t.values().last().copied().unwrap_or(0.0);
        let ablations = if r.config.ablations.is_empty() { "-".to_string() } else { r.config.ablations.join(",") };
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.2}\t{:.3}\t{}",
            path.display(),
            r.config.flavor,
            r.config.feedback_mode.as_str(),
            ablations,
            r.config.effective_budget,
            first,
            last,
            r.ves,
            r.avg_iterations,
            r.theta_commits
        );
    }
    Ok(EXIT_OK)
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::BuildContext(a) => cmd_build_context(a),
        Command::Ask(a) => cmd_ask(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}
