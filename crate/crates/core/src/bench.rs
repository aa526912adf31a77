//! Benchmark harness: dataset loading, execution accuracy, VES, per-step
//! curves and report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::critic::{CriticMode, FeedbackMode};
use crate::db::{open_read_only, query_rows, Cell, DbHandle, Row, JUDGE_TIMEOUT};
use crate::gateway::{Cassette, Fingerprint, GatewayError, ModelGateway, SharedCassette};
use crate::judges::{extract_signature, JudgeMode};
use crate::orchestrator::{solve_set, write_trace, LoopConfig, Outcome, Regression, SolveInput};
use crate::pipeline::{StagePromptSet, ThetaError, ThetaStore};
use crate::proxy::{build_proxy, content_hash, load_proxy, save_proxy, ContextProxy, ProxyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Spider,
    Bird,
}

impl Flavor {
    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::Spider => "spider",
            Flavor::Bird => "bird",
        }
    }

    fn database_dir(self) -> &'static str {
        match self {
            Flavor::Spider => "database",
            Flavor::Bird => "dev_databases",
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spider" => Ok(Flavor::Spider),
            "bird" => Ok(Flavor::Bird),
            other => Err(format!("unknown dataset flavor `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchExample {
    pub example_id: String,
    pub db_id: String,
    pub question: String,
    pub gold_sql: String,
    pub evidence: Option<String>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("runtime measurement failed: {0}")]
    Measurement(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Theta(#[from] ThetaError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Deserialize)]
struct SpiderRecord {
    db_id: String,
    question: String,
    query: String,
}

#[derive(Deserialize)]
struct BirdRecord {
    question_id: serde_json::Value,
    db_id: String,
    question: String,
    #[serde(default)]
    evidence: Option<String>,
    #[serde(rename = "SQL")]
    sql: String,
}

pub fn db_path(root: &Path, flavor: Flavor, db_id: &str) -> PathBuf {
    root.join(flavor.database_dir()).join(db_id).join(format!("{db_id}.sqlite"))
}

fn readable(path: &Path) -> Result<(), String> {
    let conn = open_read_only(path).map_err(|e| e.to_string())?;
    conn.query_row("SELECT count(*) FROM sqlite_master", [], |r| r.get::<_, i64>(0)).map_err(|e| e.to_string())?;
    Ok(())
}

/// Reads `dev.json` under `root`. Examples whose database cannot be opened
/// are skipped with a warning.
pub fn load_dataset(root: &Path, flavor: Flavor) -> Result<Vec<BenchExample>, BenchError> {
    let path = root.join("dev.json");
    if !path.is_file() {
        return Err(BenchError::MissingFile(path));
    }
    let text = fs::read_to_string(&path)?;
    parse_dataset(&text, flavor, |db_id| readable(&db_path(root, flavor, db_id)))
}

/// Parses dataset records; `check_db` decides whether a database is usable.
pub fn parse_dataset(
    text: &str,
    flavor: Flavor,
    mut check_db: impl FnMut(&str) -> Result<(), String>,
) -> Result<Vec<BenchExample>, BenchError> {
    let records: Vec<serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| BenchError::MalformedRecord { index: 0, reason: format!("dev.json is not a JSON array: {e}") })?;
    let mut usable: HashMap<String, bool> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for (index, raw) in records.into_iter().enumerate() {
        let malformed = |e: serde_json::Error| BenchError::MalformedRecord { index, reason: e.to_string() };
        let example = match flavor {
            Flavor::Spider => {
                let r: SpiderRecord = serde_json::from_value(raw).map_err(malformed)?;
                BenchExample { example_id: index.to_string(), db_id: r.db_id, question: r.question, gold_sql: r.query, evidence: None }
            }
            Flavor::Bird => {
                let r: BirdRecord = serde_json::from_value(raw).map_err(malformed)?;
                let example_id = match r.question_id {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) => n.to_string(),
                    other => {
                        return Err(BenchError::MalformedRecord {
                            index,
                            reason: format!("question_id must be a string or number, found {other}"),
                        })
                    }
                };
                let evidence = r.evidence.filter(|e| !e.trim().is_empty());
                BenchExample { example_id, db_id: r.db_id, question: r.question, gold_sql: r.sql, evidence }
            }
        };
        let ok = *usable.entry(example.db_id.clone()).or_insert_with(|| match check_db(&example.db_id) {
            Ok(()) => true,
            Err(e) => {
                tracing::warn!(db_id = %example.db_id, error = %e, "skipping examples of unreadable database");
                false
            }
        });
        if ok {
            out.push(example);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- EX

/// Cell identity under the comparison rules: numbers compared after
/// rounding to 6 decimals, NULL equal only to NULL.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CellKey {
    Null,
    Number(i128),
    Text(String),
    Blob(Vec<u8>),
}

impl From<&Cell> for CellKey {
    fn from(cell: &Cell) -> Self {
        match cell {
            Cell::Null => CellKey::Null,
            Cell::Integer(i) => CellKey::Number(i128::from(*i) * 1_000_000),
            Cell::Real(f) => CellKey::Number((f * 1e6).round() as i128),
            Cell::Text(t) => CellKey::Text(t.clone()),
            Cell::Blob(b) => CellKey::Blob(b.clone()),
        }
    }
}

fn keys(rows: &[Row]) -> Vec<Vec<CellKey>> {
    rows.iter().map(|r| r.iter().map(CellKey::from).collect()).collect()
}

/// Compares two result sets: as sequences when `ordered`, else as multisets.
pub fn results_match(pred: &[Row], gold: &[Row], ordered: bool) -> bool {
    if pred.len() != gold.len() {
        return false;
    }
    let (mut p, mut g) = (keys(pred), keys(gold));
    if !ordered {
        p.sort();
        g.sort();
    }
    p == g
}

/// Whether the outermost query of `gold_sql` has an ORDER BY.
pub fn gold_is_ordered(gold_sql: &str) -> bool {
    extract_signature(gold_sql).is_ok_and(|s| !s.ordering.is_empty())
}

/// Executes gold and prediction and compares their results. A failing
/// prediction is a mismatch; a failing gold query is an error.
pub fn execution_accuracy(pred_sql: &str, gold_sql: &str, db: &DbHandle) -> Result<bool, String> {
    let conn = open_read_only(&db.path).map_err(|e| e.to_string())?;
    let gold = query_rows(&conn, gold_sql, JUDGE_TIMEOUT).map_err(|e| format!("gold query failed: {e}"))?;
    Ok(match query_rows(&conn, pred_sql, JUDGE_TIMEOUT) {
        Ok(pred) => results_match(&pred, &gold, gold_is_ordered(gold_sql)),
        Err(_) => false,
    })
}

// ---------------------------------------------------------------- VES

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesSample {
    pub ex_match: bool,
    pub pred_runtime: f64,
    pub gold_runtime: f64,
}

/// Valid Efficiency Score over all samples. Runtimes of mismatched samples
/// are ignored; matched samples need positive runtimes. Not clamped to 100.
pub fn ves(samples: &[VesSample]) -> Result<f64, BenchError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples.iter().filter(|s| s.ex_match) {
        if !(s.pred_runtime > 0.0 && s.gold_runtime > 0.0) {
            return Err(BenchError::Measurement(format!(
                "non-positive runtime (pred {}, gold {})",
                s.pred_runtime, s.gold_runtime
            )));
        }
        total += (s.gold_runtime / s.pred_runtime).sqrt();
    }
    Ok(100.0 * total / samples.len() as f64)
}

pub const RUNTIME_RUNS: usize = 5;

/// Median wall time of `runs` executions after one warm-up run.
pub fn measure_runtime(conn: &Connection, sql: &str, runs: usize) -> Result<Duration, String> {
    query_rows(conn, sql, JUDGE_TIMEOUT).map_err(|e| e.to_string())?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        query_rows(conn, sql, JUDGE_TIMEOUT).map_err(|e| e.to_string())?;
        times.push(start.elapsed());
    }
    times.sort();
    Ok(times[times.len() / 2])
}

/// Where VES runtimes come from. Recorded runtimes live in the cassette
/// under the tag `runtime`, so a replay reproduces VES exactly.
#[derive(Debug, Clone, Default)]
pub enum Timing {
    #[default]
    Measure,
    Record(SharedCassette),
    Replay(Arc<Cassette>),
}

const RUNTIME_TAG: &str = "runtime";

impl Timing {
    /// Runtime in seconds.
    fn runtime(&self, db: &DbHandle, conn: &Connection, sql: &str) -> Result<f64, BenchError> {
        let fp = Fingerprint::of_parts(&[RUNTIME_TAG, &db.db_id, sql]);
        let measure = || -> Result<u64, BenchError> {
            let d = measure_runtime(conn, sql, RUNTIME_RUNS).map_err(BenchError::Measurement)?;
            Ok((d.as_nanos() as u64).max(1))
        };
        let nanos = match self {
            Timing::Measure => measure()?,
            Timing::Replay(cassette) => match cassette.get(&fp) {
                Some(text) => parse_nanos(text)?,
                None => return Err(GatewayError::CassetteMiss { fingerprint: fp, stage_tag: RUNTIME_TAG.into() }.into()),
            },
            Timing::Record(shared) => {
                let recorded = shared.lock().expect("cassette lock").get(&fp).map(str::to_string);
                match recorded {
                    Some(text) => parse_nanos(&text)?,
                    None => {
                        let n = measure()?;
                        shared.lock().expect("cassette lock").insert(fp, RUNTIME_TAG, &n.to_string())?;
                        n
                    }
                }
            }
        };
        Ok(nanos as f64 / 1e9)
    }
}

fn parse_nanos(text: &str) -> Result<u64, BenchError> {
    text.trim().parse().map_err(|_| BenchError::Measurement(format!("recorded runtime `{text}` is not an integer")))
}

// ---------------------------------------------------------------- proxies

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Built,
    Reused,
}

pub fn proxy_cache_path(cache_dir: &Path, db_id: &str) -> PathBuf {
    cache_dir.join(format!("{db_id}.proxy.json"))
}

/// Loads the cached proxy when its content hash still matches the database,
/// otherwise builds it (and caches it when a directory is given).
pub fn ensure_proxy(db: &DbHandle, budget_k: u32, cache_dir: Option<&Path>) -> Result<(ContextProxy, CacheStatus), ProxyError> {
    let Some(dir) = cache_dir else {
        return Ok((build_proxy(db, budget_k, None)?, CacheStatus::Built));
    };
    let path = proxy_cache_path(dir, &db.db_id);
    if path.is_file() {
        let bytes = db.bytes().map_err(|e| ProxyError::UnreadableDatabase(e.to_string()))?;
        match load_proxy(&path) {
            Ok(p) if p.content_hash == content_hash(&bytes, budget_k) => return Ok((p, CacheStatus::Reused)),
            Ok(_) => tracing::info!(db_id = %db.db_id, "proxy cache is stale; rebuilding"),
            Err(e) => tracing::warn!(db_id = %db.db_id, error = %e, "proxy cache unreadable; rebuilding"),
        }
    }
    let proxy = build_proxy(db, budget_k, None)?;
    save_proxy(&proxy, &path)?;
    Ok((proxy, CacheStatus::Built))
}

// ---------------------------------------------------------------- runs

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum ThetaPolicy {
    /// Every database starts from the shipped prompts.
    #[default]
    Fresh,
    /// Load per-database Θ from the store and save it back afterwards.
    Store(PathBuf),
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub flavor: Flavor,
    pub loop_config: LoopConfig,
    pub budget_k: u32,
    pub theta: ThetaPolicy,
    pub proxy_cache: Option<PathBuf>,
    /// Databases processed in parallel.
    pub jobs: usize,
    /// Where traces go; `None` keeps them in memory only.
    pub trace_dir: Option<PathBuf>,
    pub timing: Timing,
}

impl BenchOptions {
    pub fn new(flavor: Flavor, loop_config: LoopConfig) -> Self {
        BenchOptions {
            flavor,
            loop_config,
            budget_k: crate::proxy::DEFAULT_BUDGET_K,
            theta: ThetaPolicy::Fresh,
            proxy_cache: None,
            jobs: 1,
            trace_dir: None,
            timing: Timing::Measure,
        }
    }
}

/// The run configuration echoed into reports. Backend and paths are left
/// out so a replay reproduces the recorded report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub flavor: Flavor,
    pub budget_t: u32,
    pub effective_budget: u32,
    pub feedback_mode: FeedbackMode,
    pub ablations: Vec<String>,
    pub critic_mode: CriticMode,
    pub judge_mode: JudgeMode,
    pub regression_check: bool,
    pub budget_k: u32,
}

impl ConfigEcho {
    pub fn of(options: &BenchOptions) -> Self {
        let c = &options.loop_config;
        ConfigEcho {
            flavor: options.flavor,
            budget_t: c.budget_t,
            effective_budget: c.effective_budget(),
            feedback_mode: c.feedback_mode,
            ablations: c.ablations.iter().map(|a| a.as_str().to_string()).collect(),
            critic_mode: c.critic_mode,
            judge_mode: c.judge_mode,
            regression_check: c.regression_check,
            budget_k: options.budget_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub example_id: String,
    pub db_id: String,
    pub solved: bool,
    pub iterations: u32,
    pub ex_match: bool,
    /// EX of the candidate standing at each iteration.
    pub ex_at_t: Vec<bool>,
    pub final_sql: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dataset_digest: String,
    pub config: ConfigEcho,
    pub examples: usize,
    pub ex_at_t: BTreeMap<u32, f64>,
    pub ves: f64,
    pub avg_iterations: f64,
    pub theta_commits: u32,
    pub regressions: Vec<Regression>,
    pub per_example: Vec<ExampleResult>,
}

/// SHA-256 over the examples' canonical JSON.
pub fn dataset_digest(examples: &[BenchExample]) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(examples).expect("examples serialize")))
}

struct GroupResult {
    results: Vec<(usize, ExampleResult, VesSample)>,
    theta_commits: u32,
    regressions: Vec<Regression>,
}

fn failed(example: &BenchExample, budget: u32, error: String) -> ExampleResult {
    ExampleResult {
        example_id: example.example_id.clone(),
        db_id: example.db_id.clone(),
        solved: false,
        iterations: 0,
        ex_match: false,
        ex_at_t: vec![false; budget as usize + 1],
        final_sql: None,
        error: Some(error),
    }
}

/// File-system safe trace name for an example id.
pub fn trace_file_name(example_id: &str) -> String {
    let safe: String =
        example_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    format!("{safe}.jsonl")
}

fn score_outcome(
    example: &BenchExample,
    outcome: &Outcome,
    db: &DbHandle,
    conn: &Connection,
    budget: u32,
    timing: &Timing,
) -> Result<(ExampleResult, VesSample), BenchError> {
    let gold = match query_rows(conn, &example.gold_sql, JUDGE_TIMEOUT) {
        Ok(rows) => rows,
        Err(e) => {
            let mut r = failed(example, budget, format!("gold query failed: {e}"));
            r.solved = outcome.solved;
            r.iterations = outcome.iterations_used;
            r.final_sql = outcome.final_sql.as_ref().map(|c| c.text.clone());
            return Ok((r, VesSample { ex_match: false, pred_runtime: 0.0, gold_runtime: 0.0 }));
        }
    };
    let ordered = gold_is_ordered(&example.gold_sql);
    let mut cache: HashMap<&str, bool> = HashMap::new();
    let mut ex_at_t = Vec::with_capacity(budget as usize + 1);
    for t in 0..=budget {
        let ok = match outcome.candidate_at(t) {
            Some(c) => *cache.entry(c.text.as_str()).or_insert_with(|| {
                query_rows(conn, &c.text, JUDGE_TIMEOUT).is_ok_and(|pred| results_match(&pred, &gold, ordered))
            }),
            None => false,
        };
        ex_at_t.push(ok);
    }
    let ex_match = *ex_at_t.last().expect("at least t=0");
    let final_sql = outcome.final_sql.as_ref().map(|c| c.text.clone());
    let sample = match (&final_sql, ex_match) {
        (Some(sql), true) => VesSample {
            ex_match,
            pred_runtime: timing.runtime(db, conn, sql)?,
            gold_runtime: timing.runtime(db, conn, &example.gold_sql)?,
        },
        _ => VesSample { ex_match: false, pred_runtime: 0.0, gold_runtime: 0.0 },
    };
    let result = ExampleResult {
        example_id: example.example_id.clone(),
        db_id: example.db_id.clone(),
        solved: outcome.solved,
        iterations: outcome.iterations_used,
        ex_match,
        ex_at_t,
        final_sql,
        error: outcome.error.clone(),
    };
    Ok((result, sample))
}

fn run_group(
    root: &Path,
    db_id: &str,
    members: &[(usize, &BenchExample)],
    options: &BenchOptions,
    gateway: &dyn ModelGateway,
) -> Result<GroupResult, BenchError> {
    let budget = options.loop_config.effective_budget();
    let db = DbHandle::new(db_id, db_path(root, options.flavor, db_id));
    let all_failed = |error: String| GroupResult {
        results: members
            .iter()
            .map(|(i, e)| (*i, failed(e, budget, error.clone()), VesSample { ex_match: false, pred_runtime: 0.0, gold_runtime: 0.0 }))
            .collect(),
        theta_commits: 0,
        regressions: Vec::new(),
    };
    let proxy = match ensure_proxy(&db, options.budget_k, options.proxy_cache.as_deref()) {
        Ok((p, _)) => p,
        Err(e) => return Ok(all_failed(format!("context proxy: {e}"))),
    };
    let store = match &options.theta {
        ThetaPolicy::Fresh => None,
        ThetaPolicy::Store(dir) => Some(ThetaStore::new(dir)),
    };
    let mut theta = match &store {
        Some(s) => s.load_or_default(db_id)?,
        None => StagePromptSet::defaults(db_id),
    };
    let inputs: Vec<SolveInput<'_>> = members
        .iter()
        .map(|(_, e)| SolveInput {
            example_id: &e.example_id,
            question: &e.question,
            evidence: e.evidence.as_deref(),
            db: &db,
            proxy: &proxy,
        })
        .collect();
    let set = solve_set(&inputs, &mut theta, &options.loop_config, gateway)?;
    if let Some(s) = &store {
        s.save(&theta)?;
    }
    let conn = match open_read_only(&db.path) {
        Ok(c) => c,
        Err(e) => return Ok(all_failed(format!("database: {e}"))),
    };
    let mut results = Vec::with_capacity(members.len());
    for ((index, example), outcome) in members.iter().zip(&set.outcomes) {
        if let Some(dir) = &options.trace_dir {
            write_trace(&dir.join(trace_file_name(&example.example_id)), outcome)?;
        }
        let (result, sample) = score_outcome(example, outcome, &db, &conn, budget, &options.timing)?;
        results.push((*index, result, sample));
    }
    Ok(GroupResult { results, theta_commits: set.theta_commits, regressions: set.regressions })
}

/// Solves every example, one Θ per database, databases in parallel up to
/// `options.jobs`. Per-example failures are recorded; fatal gateway errors
/// (replay misses) abort the run.
pub fn run_benchmark(
    root: &Path,
    examples: &[BenchExample],
    options: &BenchOptions,
    gateway: &dyn ModelGateway,
) -> Result<BenchReport, BenchError> {
    let mut groups: BTreeMap<&str, Vec<(usize, &BenchExample)>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.db_id.as_str()).or_default().push((i, e));
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<Result<GroupResult, BenchError>>>> = Mutex::new((0..groups.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..options.jobs.clamp(1, groups.len().max(1)) {
            scope.spawn(|| loop {
                let g = next.fetch_add(1, Ordering::SeqCst);
                let Some((db_id, members)) = groups.get(g) else { break };
                let result = run_group(root, db_id, members, options, gateway);
                done.lock().expect("result lock")[g] = Some(result);
            });
        }
    });

    let budget = options.loop_config.effective_budget();
    let mut per_example: Vec<Option<ExampleResult>> = vec![None; examples.len()];
    let mut samples = vec![VesSample { ex_match: false, pred_runtime: 0.0, gold_runtime: 0.0 }; examples.len()];
    let mut theta_commits = 0;
    let mut regressions = Vec::new();
    for group in done.into_inner().expect("result lock") {
        let group = group.expect("every group ran")?;
        theta_commits += group.theta_commits;
        regressions.extend(group.regressions);
        for (i, result, sample) in group.results {
            per_example[i] = Some(result);
            samples[i] = sample;
        }
    }
    let per_example: Vec<ExampleResult> = per_example.into_iter().map(|r| r.expect("every example scored")).collect();
    let n = per_example.len();
    let ex_at_t = (0..=budget)
        .map(|t| {
            let hits = per_example.iter().filter(|r| r.ex_at_t[t as usize]).count();
            (t, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    let avg_iterations =
        if n == 0 { 0.0 } else { per_example.iter().map(|r| f64::from(r.iterations)).sum::<f64>() / n as f64 };
    Ok(BenchReport {
        dataset_digest: dataset_digest(examples),
        config: ConfigEcho::of(options),
        examples: n,
        ex_at_t,
        ves: ves(&samples)?,
        avg_iterations,
        theta_commits,
        regressions,
        per_example,
    })
}

pub fn report_json(report: &BenchReport) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize") + "\n"
}

pub fn curves_csv(report: &BenchReport) -> String {
    let mut out = String::from("t,ex\n");
    for (t, ex) in &report.ex_at_t {
        out.push_str(&format!("{t},{ex:.6}\n"));
    }
    out
}

/// Writes `report.json` and `curves.csv` into `out_dir`.
pub fn write_report(out_dir: &Path, report: &BenchReport) -> std::io::Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), report_json(report))?;
    fs::write(out_dir.join("curves.csv"), curves_csv(report))
}

/// The first place two reports disagree, described for a person.
pub fn first_divergence(a: &BenchReport, b: &BenchReport) -> Option<String> {
    if a.dataset_digest != b.dataset_digest {
        return Some("dataset digests differ".into());
    }
    if a.config != b.config {
        return Some("configurations differ".into());
    }
    for (x, y) in a.per_example.iter().zip(&b.per_example) {
        if x != y {
            return Some(format!("example {} differs", x.example_id));
        }
    }
    if a.per_example.len() != b.per_example.len() {
        return Some("example counts differ".into());
    }
    (report_json(a) != report_json(b)).then(|| "aggregate metrics differ".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_keys_round_numbers() {
        assert_eq!(CellKey::from(&Cell::Integer(3)), CellKey::from(&Cell::Real(3.0000001)));
        assert_ne!(CellKey::from(&Cell::Integer(3)), CellKey::from(&Cell::Real(3.00001)));
        assert_ne!(CellKey::from(&Cell::Null), CellKey::from(&Cell::Integer(0)));
        assert_ne!(CellKey::from(&Cell::Text("1".into())), CellKey::from(&Cell::Integer(1)));
    }

    #[test]
    fn order_sensitivity() {
        let a = vec![vec![Cell::Integer(1)], vec![Cell::Integer(2)]];
        let b = vec![vec![Cell::Integer(2)], vec![Cell::Integer(1)]];
        assert!(results_match(&a, &b, false));
        assert!(!results_match(&a, &b, true));
        assert!(!results_match(&a, &a[..1], false));
    }

    #[test]
    fn ordered_gold_detection() {
        assert!(gold_is_ordered("SELECT a FROM t ORDER BY a"));
        assert!(!gold_is_ordered("SELECT a FROM (SELECT a FROM t ORDER BY a)"));
        assert!(!gold_is_ordered("SELECT a FROM t"));
    }

    #[test]
    fn ves_by_hand() {
        let s = |ex_match, pred_runtime, gold_runtime| VesSample { ex_match, pred_runtime, gold_runtime };
        assert_eq!(ves(&[]).unwrap(), 0.0);
        assert_eq!(ves(&[s(false, 0.0, 0.0)]).unwrap(), 0.0);
        assert_eq!(ves(&[s(true, 0.5, 0.5), s(false, 0.0, 0.0)]).unwrap(), 50.0);
        assert!((ves(&[s(true, 1.0, 2.0)]).unwrap() - 100.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!(ves(&[s(true, 0.0, 1.0)]).is_err());
    }

    #[test]
    fn dataset_records() {
        let spider = r#"[{"db_id":"concert","question":"q","query":"SELECT 1","query_toks":[]}]"#;
        let ex = parse_dataset(spider, Flavor::Spider, |_| Ok(())).unwrap();
        assert_eq!(ex[0].example_id, "0");
        assert_eq!(ex[0].evidence, None);
        let bird = r#"[{"question_id":7,"db_id":"d","question":"q","evidence":"e","SQL":"SELECT 1","difficulty":"simple"}]"#;
        let ex = parse_dataset(bird, Flavor::Bird, |_| Ok(())).unwrap();
        assert_eq!((ex[0].example_id.as_str(), ex[0].evidence.as_deref()), ("7", Some("e")));
        assert!(parse_dataset("[]", Flavor::Bird, |_| Ok(())).unwrap().is_empty());
        assert!(matches!(
            parse_dataset(r#"[{"db_id":"d"}]"#, Flavor::Spider, |_| Ok(())),
            Err(BenchError::MalformedRecord { index: 0, .. })
        ));
        let skipped = parse_dataset(spider, Flavor::Spider, |_| Err("gone".into())).unwrap();
        assert!(skipped.is_empty());
    }
}
