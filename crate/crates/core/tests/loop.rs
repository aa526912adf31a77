use std::collections::BTreeMap;

use reflectsql::critic::CriticMode;
use reflectsql::db::DbHandle;
use reflectsql::gateway::{CountingGateway, Script, ScriptedBackend};
use reflectsql::judges::JudgeMode;
use reflectsql::orchestrator::{solve, solve_set, Ablation, LoopConfig, Outcome, SolveInput};
use reflectsql::pipeline::StagePromptSet;
use reflectsql::proxy::{build_proxy, ContextProxy, DEFAULT_BUDGET_K};
use reflectsql::testkit::{self, ScriptedExample};
use reflectsql::{CallTag, StageId};
use serde_json::json;
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    db: DbHandle,
    proxy: ContextProxy,
}

fn fixture(make: fn(&std::path::Path) -> rusqlite::Result<DbHandle>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let db = make(dir.path()).unwrap();
    let proxy = build_proxy(&db, DEFAULT_BUDGET_K, None).unwrap();
    Fixture { _dir: dir, db, proxy }
}

fn run(f: &Fixture, id: &str, question: &str, script: Script, config: &LoopConfig) -> (Outcome, StagePromptSet) {
    let gw = ScriptedBackend::new(script);
    let mut theta = StagePromptSet::defaults(&f.db.db_id);
    let input = SolveInput { example_id: id, question, evidence: None, db: &f.db, proxy: &f.proxy };
    (solve(&input, &mut theta, config, &gw).unwrap(), theta)
}

fn worked_config() -> LoopConfig {
    LoopConfig { critic_mode: CriticMode::Model, judge_mode: JudgeMode::Model, ..LoopConfig::default() }
}

#[test]
fn worked_example_converges_in_two_steps() {
    let f = fixture(testkit::california_schools);
    let (outcome, theta) = run(&f, testkit::WORKED_ID, testkit::WORKED_QUESTION, testkit::worked_script(), &worked_config());
    assert!(outcome.solved, "{:#?}", outcome.trace.last());
    assert_eq!(outcome.iterations_used, 2);
    assert_eq!(outcome.trace.len(), 3);
    assert_eq!(outcome.final_sql.unwrap().text, testkit::WORKED_SQL[2]);
    assert_eq!(outcome.theta_commits, 2);
    assert_eq!(theta.version(StageId::Sql), 3);
    assert_eq!(theta.version(StageId::Plan), 1);
    for t in 0..2 {
        assert_eq!(outcome.trace[t].refined_stage, Some(StageId::Sql));
    }
}

#[test]
fn worked_example_with_rule_critic() {
    let f = fixture(testkit::california_schools);
    let config = LoopConfig { critic_mode: CriticMode::Rules, ..worked_config() };
    let (outcome, _) = run(&f, testkit::WORKED_ID, testkit::WORKED_QUESTION, testkit::worked_script(), &config);
    assert!(outcome.solved);
    assert_eq!(outcome.iterations_used, 2);
    assert_eq!(outcome.trace[0].calls.get("critic"), None);
}

#[test]
fn early_stop_makes_no_loop_calls() {
    let f = fixture(testkit::california_schools);
    let mut ex = testkit::worked_example();
    ex.sql = vec![(None, testkit::WORKED_GOLD.into())];
    let script = ex
        .into_script(Script::default())
        .respond(CallTag::Judge, testkit::WORKED_ID, None, [testkit::judge_reply(true, &[], "ok")]);
    let gw = CountingGateway::new(ScriptedBackend::new(script));
    let mut theta = StagePromptSet::defaults("california_schools");
    let before = theta.clone();
    let input =
        SolveInput { example_id: testkit::WORKED_ID, question: testkit::WORKED_QUESTION, evidence: None, db: &f.db, proxy: &f.proxy };
    let outcome = solve(&input, &mut theta, &worked_config(), &gw).unwrap();
    assert!(outcome.solved);
    assert_eq!(outcome.iterations_used, 0);
    assert!(outcome.trace[0].critique.is_none());
    assert_eq!(gw.total(), 5);
    assert_eq!(gw.count(CallTag::Judge), 1);
    assert_eq!(gw.count(CallTag::Critic) + gw.count(CallTag::Refiner), 0);
    assert_eq!(theta, before);
}

#[test]
fn exhausted_budget_returns_last_candidate() {
    let f = fixture(testkit::california_schools);
    let script = testkit::worked_script().respond(
        CallTag::Judge,
        testkit::WORKED_ID,
        None,
        [testkit::judge_reply(false, &["something"], "never satisfied")],
    );
    // Keyed judge replies still win at t=0 and t=1; both reject.
    let config = LoopConfig { budget_t: 1, ..worked_config() };
    let (outcome, _) = run(&f, testkit::WORKED_ID, testkit::WORKED_QUESTION, script, &config);
    assert!(!outcome.solved);
    assert_eq!(outcome.iterations_used, 1);
    assert_eq!(outcome.trace.len(), 2);
    assert_eq!(outcome.final_sql.unwrap().text, testkit::WORKED_SQL[1]);
    assert!(outcome.trace[1].critique.is_none());
}

#[test]
fn single_shot_stops_after_compose() {
    let f = fixture(testkit::california_schools);
    let config = LoopConfig { ablations: [Ablation::SingleShot].into(), ..worked_config() };
    let (outcome, theta) = run(&f, testkit::WORKED_ID, testkit::WORKED_QUESTION, testkit::worked_script(), &config);
    assert!(!outcome.solved);
    assert_eq!(outcome.trace.len(), 1);
    assert_eq!(outcome.theta_commits, 0);
    assert_eq!(theta.version(StageId::Sql), 1);
}

#[test]
fn no_semantic_checker_accepts_executable_sql() {
    let f = fixture(testkit::california_schools);
    let config = LoopConfig { ablations: [Ablation::NoSemanticChecker].into(), ..worked_config() };
    let (outcome, _) = run(&f, testkit::WORKED_ID, testkit::WORKED_QUESTION, testkit::worked_script(), &config);
    assert!(outcome.solved);
    assert_eq!(outcome.final_sql.unwrap().text, testkit::WORKED_SQL[0]);
    assert_eq!(outcome.trace[0].calls.get("judge"), None);
}

#[test]
fn no_critic_reruns_sql_only_on_syntax_failure() {
    let f = fixture(testkit::california_schools);
    let mut ex = testkit::worked_example();
    ex.sql = vec![(None, "SELECT FROM WHERE;".into())];
    let config = LoopConfig { ablations: [Ablation::NoCritic].into(), budget_t: 2, ..LoopConfig::default() };
    let (outcome, _) = run(&f, testkit::WORKED_ID, "q", ex.into_script(Script::default()), &config);
    assert!(!outcome.solved);
    assert_eq!(outcome.trace.len(), 3);
    for rec in &outcome.trace[1..] {
        assert_eq!(rec.calls.get("sql"), Some(&1), "{:?}", rec.calls);
        assert_eq!(rec.calls.len(), 1);
    }
}

#[test]
fn stage_contract_failure_ends_unsolved_with_error() {
    let f = fixture(testkit::california_schools);
    let mut ex = testkit::worked_example();
    ex.stage1 = json!({ "tables": ["nope"], "attributes": [] }).to_string();
    let (outcome, _) = run(&f, testkit::WORKED_ID, "q", ex.into_script(Script::default()), &LoopConfig::default());
    assert!(!outcome.solved);
    assert!(outcome.error.is_some());
    assert!(outcome.final_sql.is_none());
    assert_eq!(outcome.trace[0].calls.get("stage1"), Some(&2), "one repair attempt");
}

fn mechanism_inputs<'a>(f: &'a Fixture) -> Vec<SolveInput<'a>> {
    testkit::MECHANISM_QUESTIONS
        .iter()
        .map(|(id, q, _)| SolveInput { example_id: id, question: q, evidence: None, db: &f.db, proxy: &f.proxy })
        .collect()
}

#[test]
fn mechanism_set_commits_once_without_regressions() {
    let f = fixture(testkit::concert_singer);
    let gw = ScriptedBackend::new(testkit::mechanism_script());
    let mut theta = StagePromptSet::defaults("concert_singer");
    let set = solve_set(&mechanism_inputs(&f), &mut theta, &LoopConfig::default(), &gw).unwrap();
    let solved: Vec<bool> = set.outcomes.iter().map(|o| o.solved).collect();
    assert_eq!(solved, [true, true, true]);
    assert_eq!(set.theta_commits, 1);
    assert!(set.regressions.is_empty());
    assert_eq!(set.pass_counts_after_commit, vec![2]);
    assert_eq!(set.outcomes[1].iterations_used, 1);
}

#[test]
fn mechanism_set_single_shot_never_commits() {
    let f = fixture(testkit::concert_singer);
    let gw = ScriptedBackend::new(testkit::mechanism_script());
    let mut theta = StagePromptSet::defaults("concert_singer");
    let config = LoopConfig { ablations: [Ablation::SingleShot].into(), ..LoopConfig::default() };
    let set = solve_set(&mechanism_inputs(&f), &mut theta, &config, &gw).unwrap();
    assert_eq!(set.theta_commits, 0);
    assert_eq!(set.outcomes.iter().filter(|o| o.solved).count(), 2);
}

#[test]
fn interaction_free_order_does_not_matter() {
    let f = fixture(testkit::concert_singer);
    let solved_count = |order: &[usize]| {
        let gw = ScriptedBackend::new(testkit::mechanism_script());
        let mut theta = StagePromptSet::defaults("concert_singer");
        let all = mechanism_inputs(&f);
        let inputs: Vec<_> = order.iter().map(|&i| all[i]).collect();
        let set = solve_set(&inputs, &mut theta, &LoopConfig::default(), &gw).unwrap();
        set.outcomes.iter().filter(|o| o.solved).count()
    };
    assert_eq!(solved_count(&[0, 1, 2]), solved_count(&[2, 1, 0]));
    assert_eq!(solved_count(&[1, 0, 2]), 3);
}

#[test]
fn regression_is_reported() {
    // A passes at v1 and is broken by the SQL revision B triggers.
    let f = fixture(testkit::concert_singer);
    let mut examples = testkit::mechanism_examples();
    examples[0].sql = vec![(Some(1), "SELECT COUNT(*) FROM singer;".into()), (None, "SELECT name FROM singer;".into())];
    let script = examples.into_iter().fold(Script::default(), |s, e: ScriptedExample| e.into_script(s)).respond(
        CallTag::Refiner,
        "1",
        Some(1),
        [testkit::refiner_reply(StageId::Sql, &[testkit::MECHANISM_NOTE])],
    );
    let gw = ScriptedBackend::new(script);
    let mut theta = StagePromptSet::defaults("concert_singer");
    let inputs = mechanism_inputs(&f);
    let set = solve_set(&inputs[..2], &mut theta, &LoopConfig::default(), &gw).unwrap();
    assert_eq!(set.regressions.len(), 1);
    assert_eq!(set.regressions[0].example_id, "0");
    assert_eq!(set.regressions[0].caused_by, "1");
    assert_eq!(set.pass_counts_after_commit, vec![1]);
    assert_eq!(set.regressions[0].theta_versions, BTreeMap::from([
        (StageId::Stage1, 1),
        (StageId::Stage2, 1),
        (StageId::Plan, 1),
        (StageId::Sql, 2),
    ]));
}

#[test]
fn identical_runs_produce_identical_traces() {
    let f = fixture(testkit::california_schools);
    let a = run(&f, testkit::WORKED_ID, testkit::WORKED_QUESTION, testkit::worked_script(), &worked_config()).0;
    let b = run(&f, testkit::WORKED_ID, testkit::WORKED_QUESTION, testkit::worked_script(), &worked_config()).0;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
