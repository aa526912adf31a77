use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reflectsql::testkit;
use tempfile::TempDir;

fn reflectsql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reflectsql")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace { dir: tempfile::tempdir().unwrap() };
        testkit::write_spider_fixture(&ws.path("data")).unwrap();
        let script = serde_json::to_string_pretty(&testkit::mechanism_script()).unwrap();
        fs::write(ws.path("script.json"), script).unwrap();
        ws
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn db(&self) -> String {
        self.s("data/database/concert_singer/concert_singer.sqlite")
    }
}

#[test]
fn build_context_is_idempotent() {
    let ws = Workspace::new();
    let cache = ws.s("cache");
    let first = reflectsql(&["build-context", "--db", &ws.db(), "--proxy-cache", &cache]);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert!(stdout(&first).contains("concert_singer: built"));
    assert!(ws.path("cache/concert_singer.proxy.json").is_file());
    let second = reflectsql(&["build-context", "--db", &ws.db(), "--proxy-cache", &cache]);
    assert_eq!(second.status.code(), Some(0));
    assert!(stdout(&second).contains("skipped (hash match)"));
}

#[test]
fn build_context_lists_corrupt_databases() {
    let ws = Workspace::new();
    let bad = ws.path("broken.sqlite");
    let bytes = fs::read(ws.db()).unwrap();
    fs::write(&bad, &bytes[..bytes.len() / 3]).unwrap();
    let out = reflectsql(&["build-context", "--db", &ws.db(), "--db", &bad.to_string_lossy(), "--proxy-cache", &ws.s("cache")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("concert_singer: built"));
    assert!(stdout(&out).contains("broken.sqlite: failed"), "{}", stdout(&out));
}

fn ask(ws: &Workspace, id: &str, extra: &[&str]) -> Output {
    let question = testkit::MECHANISM_QUESTIONS.iter().find(|q| q.0 == id).unwrap().1;
    let script = ws.s("script.json");
    let db = ws.db();
    let mut args = vec!["ask", "--db", &db, "--question", question, "--id", id, "--script", &script];
    args.extend_from_slice(extra);
    reflectsql(&args)
}

#[test]
fn ask_prints_sql_and_exit_code() {
    let ws = Workspace::new();
    let cache = ws.s("cache");
    let out = ask(&ws, "0", &["--proxy-cache", &cache, "--build-context", "--out", &ws.s("run")]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "SELECT COUNT(*) FROM singer;");
    let trace = fs::read_to_string(ws.path("run/traces/0.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);

    let unsolved = ask(&ws, "1", &["--proxy-cache", &cache, "--budget", "0"]);
    assert_eq!(unsolved.status.code(), Some(2), "{}", stderr(&unsolved));
    assert_eq!(stdout(&unsolved).trim(), "SELECT name FROM singer;");

    let solved_after_refinement = ask(&ws, "1", &["--proxy-cache", &cache]);
    assert_eq!(solved_after_refinement.status.code(), Some(0));
    assert!(stdout(&solved_after_refinement).contains("country = 'France'"));
}

#[test]
fn ask_without_proxy_explains_itself() {
    let ws = Workspace::new();
    let out = ask(&ws, "0", &["--proxy-cache", &ws.s("empty-cache")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("build-context"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_1() {
    let ws = Workspace::new();
    let db = ws.db();
    let cases: [&[&str]; 3] = [
        &["ask", "--db", &db, "--question", "q", "--build-context"],
        &["ask", "--db", &db, "--question", "q", "--build-context", "--backend", "replay"],
        &["bench", "--dataset", "nowhere", "--out", "x", "--flavor", "sqlserver"],
    ];
    for args in cases {
        assert_eq!(reflectsql(args).status.code(), Some(1), "{args:?}");
    }
}

fn bench(ws: &Workspace, out: &str, extra: &[&str]) -> Output {
    let (data, out, script) = (ws.s("data"), ws.s(out), ws.s("script.json"));
    let mut args = vec!["bench", "--dataset", &data, "--out", &out, "--script", &script];
    args.extend_from_slice(extra);
    reflectsql(&args)
}

fn replay(ws: &Workspace, cassette: &Path, out: &str, compare: Option<&str>) -> Output {
    let (data, out, cassette) = (ws.s("data"), ws.s(out), cassette.to_string_lossy().into_owned());
    let mut args = vec!["replay", "--cassette", &cassette, "--dataset", &data, "--out", &out];
    let compare = compare.map(|c| ws.s(c));
    if let Some(c) = &compare {
        args.extend(["--compare", c.as_str()]);
    }
    reflectsql(&args)
}

#[test]
fn bench_then_replay_is_byte_identical() {
    let ws = Workspace::new();
    let cassette = ws.s("run.cassette.json");
    let rec = bench(&ws, "a", &["--cassette", &cassette, "--jobs", "2"]);
    assert_eq!(rec.status.code(), Some(0), "{}", stderr(&rec));
    assert!(stdout(&rec).starts_with("t,ex\n0,0.666667\n1,1.000000\n"), "{}", stdout(&rec));
    for name in ["report.json", "curves.csv", "traces/0.jsonl", "traces/1.jsonl", "traces/2.jsonl"] {
        assert!(ws.path("a").join(name).is_file(), "{name}");
    }
    let rep = replay(&ws, Path::new(&cassette), "b", Some("a/report.json"));
    assert_eq!(rep.status.code(), Some(0), "{}", stderr(&rep));
    assert_eq!(stdout(&rep).trim(), "identical");
    assert_eq!(fs::read(ws.path("a/report.json")).unwrap(), fs::read(ws.path("b/report.json")).unwrap());
}

#[test]
fn replay_of_edited_cassette_names_the_divergent_example() {
    let ws = Workspace::new();
    let cassette = ws.path("run.cassette.json");
    assert_eq!(bench(&ws, "a", &["--cassette", &cassette.to_string_lossy()]).status.code(), Some(0));
    let edited = fs::read_to_string(&cassette).unwrap().replace(
        "\"SELECT AVG(age) FROM singer;\"",
        "\"SELECT AVG(age) FROM singer WHERE age > 30;\"",
    );
    fs::write(&cassette, edited).unwrap();
    let rep = replay(&ws, &cassette, "b", Some("a"));
    assert_eq!(rep.status.code(), Some(2), "{}", stderr(&rep));
    assert_eq!(stdout(&rep).trim(), "diverged: example 2 differs");
}

#[test]
fn replay_miss_reports_fingerprint() {
    let ws = Workspace::new();
    let cassette = ws.path("empty.json");
    fs::write(&cassette, "[]").unwrap();
    let rep = replay(&ws, &cassette, "b", None);
    assert_eq!(rep.status.code(), Some(1));
    assert!(stderr(&rep).contains("fingerprint") || stderr(&rep).contains("cassette"), "{}", stderr(&rep));
}

#[test]
fn ablation_shows_in_config_echo_and_report() {
    let ws = Workspace::new();
    let out = bench(&ws, "ss", &["--ablation", "single-shot"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("ss/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["ablations"], serde_json::json!(["single-shot"]));
    assert_eq!(report["config"]["effective_budget"], 0);
    let summary = reflectsql(&["report", &ws.s("ss")]);
    assert_eq!(summary.status.code(), Some(0));
    assert!(stdout(&summary).lines().nth(1).unwrap().contains("single-shot"));
}
