//! The refinement loop: compose, evaluate, stop early, critique, localize,
//! reflect, commit, selectively restart; bounded by a budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::critic::{critique, localize, CriticInput, CriticMode, Critique, FeedbackMode, Localized};
use crate::db::DbHandle;
use crate::gateway::{CountingGateway, GatewayError, ModelGateway};
use crate::judges::{evaluate, EvalInput, EvalOptions, EvalReport, JudgeMode};
use crate::pipeline::{
    compose, rerun_from, rerun_sql_with_feedback, PipelineFailure, PipelineState, QuestionContext, RepairError,
    SqlCandidate, StagePromptSet,
};
use crate::proxy::ContextProxy;
use crate::refiner::{commit, reflect, refine_target, PromptRevision, RefineInput};
use crate::stage::{CriticStage, StageId};

pub const DEFAULT_BUDGET: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Skip critique and refinement; rerun the SQL stage on syntax failures only.
    NoCritic,
    /// Treat every candidate as semantically correct.
    NoSemanticChecker,
    /// Return the first composed candidate.
    SingleShot,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoCritic => "no-critic",
            Ablation::NoSemanticChecker => "no-semantic-checker",
            Ablation::SingleShot => "single-shot",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-critic" => Ok(Ablation::NoCritic),
            "no-semantic-checker" => Ok(Ablation::NoSemanticChecker),
            "single-shot" => Ok(Ablation::SingleShot),
            other => Err(format!("unknown ablation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub budget_t: u32,
    pub feedback_mode: FeedbackMode,
    pub ablations: BTreeSet<Ablation>,
    pub critic_mode: CriticMode,
    pub judge_mode: JudgeMode,
    /// Re-check earlier solved examples after each Θ commit in `solve_set`.
    pub regression_check: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            budget_t: DEFAULT_BUDGET,
            feedback_mode: FeedbackMode::Granular,
            ablations: BTreeSet::new(),
            critic_mode: CriticMode::Rules,
            judge_mode: JudgeMode::Stub,
            regression_check: true,
        }
    }
}

impl LoopConfig {
    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablations.contains(&ablation)
    }

    pub fn effective_budget(&self) -> u32 {
        if self.has(Ablation::SingleShot) {
            0
        } else {
            self.budget_t
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            judge_mode: self.judge_mode,
            semantic_checker: !self.has(Ablation::NoSemanticChecker),
            ..EvalOptions::default()
        }
    }
}

/// One loop iteration: the candidate standing at `iteration`, its
/// evaluation, and what the loop did about it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub candidate: Option<SqlCandidate>,
    pub report: Option<EvalReport>,
    pub critique: Option<Critique>,
    pub localized: Option<Localized>,
    pub refined_stage: Option<StageId>,
    pub revision: Option<PromptRevision>,
    /// Θ versions that produced the candidate.
    pub theta_versions: BTreeMap<StageId, u32>,
    pub selected_tables: Vec<String>,
    pub normalizations: Vec<String>,
    /// Model calls spent on this iteration, by tag: producing the candidate,
    /// judging it, and critiquing and refining after it.
    pub calls: BTreeMap<String, usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub example_id: String,
    pub final_sql: Option<SqlCandidate>,
    pub solved: bool,
    pub iterations_used: u32,
    pub theta_commits: u32,
    pub error: Option<String>,
    pub trace: Vec<IterationRecord>,
}

impl Outcome {
    /// The candidate standing at iteration `t`, carried forward after the
    /// loop stopped.
    pub fn candidate_at(&self, t: u32) -> Option<&SqlCandidate> {
        self.trace.iter().take_while(|r| r.iteration <= t).filter_map(|r| r.candidate.as_ref()).last()
    }
}

/// One question against one database.
#[derive(Debug, Clone, Copy)]
pub struct SolveInput<'a> {
    pub example_id: &'a str,
    pub question: &'a str,
    pub evidence: Option<&'a str>,
    pub db: &'a DbHandle,
    pub proxy: &'a ContextProxy,
}

impl<'a> SolveInput<'a> {
    fn ctx(&self) -> QuestionContext<'a> {
        QuestionContext { example_id: self.example_id, question: self.question, evidence: self.evidence, proxy: self.proxy }
    }
}

fn tag_counts<G: ModelGateway>(counter: &CountingGateway<G>) -> BTreeMap<String, usize> {
    counter.snapshot().into_iter().map(|(tag, n)| (tag.as_str().to_string(), n)).collect()
}

fn fatal(err: &PipelineFailure) -> Option<GatewayError> {
    match &err.error.kind {
        crate::pipeline::StageErrorKind::Gateway(g) if g.is_fatal() => Some(g.clone()),
        _ => None,
    }
}

struct Loop<'a, 'g> {
    input: &'a SolveInput<'a>,
    config: &'a LoopConfig,
    counter: CountingGateway<&'g dyn ModelGateway>,
    trace: Vec<IterationRecord>,
    commits: u32,
}

impl Loop<'_, '_> {
    fn record(&mut self, iteration: u32, state: Option<&PipelineState>) -> IterationRecord {
        IterationRecord {
            iteration,
            candidate: state.and_then(|s| s.sql.clone()),
            report: None,
            critique: None,
            localized: None,
            refined_stage: None,
            revision: None,
            theta_versions: state.map(|s| s.versions.clone()).unwrap_or_default(),
            selected_tables: state.and_then(|s| s.stage1.as_ref()).map(|s| s.tables.clone()).unwrap_or_default(),
            normalizations: state.map(|s| s.normalizations.clone()).unwrap_or_default(),
            calls: BTreeMap::new(),
            error: None,
        }
    }

    fn push(&mut self, mut record: IterationRecord) {
        record.calls = tag_counts(&self.counter);
        self.counter.reset();
        self.trace.push(record);
    }

    fn finish(self, solved: bool, error: Option<String>) -> Outcome {
        let iterations_used = self.trace.last().map_or(0, |r| r.iteration);
        let final_sql = self.trace.iter().rev().find_map(|r| r.candidate.clone());
        Outcome {
            example_id: self.input.example_id.to_string(),
            final_sql,
            solved,
            iterations_used,
            theta_commits: self.commits,
            error,
            trace: self.trace,
        }
    }
}

/// Solves one question, revising `theta` along the way. Only fatal gateway
/// errors (replay misses) escape; anything else ends in an unsolved outcome.
pub fn solve(
    input: &SolveInput<'_>,
    theta: &mut StagePromptSet,
    config: &LoopConfig,
    gateway: &dyn ModelGateway,
) -> Result<Outcome, GatewayError> {
    let ctx = input.ctx();
    let budget = config.effective_budget();
    let options = config.eval_options();
    let mut lp = Loop { input, config, counter: CountingGateway::new(gateway), trace: Vec::new(), commits: 0 };

    let mut state = match compose(&ctx, theta, &lp.counter) {
        Ok(s) => s,
        Err(failure) => {
            if let Some(e) = fatal(&failure) {
                return Err(e);
            }
            let mut rec = lp.record(0, Some(&failure.state));
            rec.error = Some(failure.to_string());
            lp.push(rec);
            return Ok(lp.finish(false, Some(failure.to_string())));
        }
    };

    let mut t = 0;
    loop {
        let mut rec = lp.record(t, Some(&state));
        let candidate = state.sql.clone().expect("complete state has SQL");
        let plan = state.plan.clone().expect("complete state has a plan");
        let eval_input = EvalInput {
            example_id: input.example_id,
            question: input.question,
            candidate: &candidate,
            plan: &plan,
            proxy: input.proxy,
            db: input.db,
            iteration: t,
        };
        let report = evaluate(&eval_input, &options, &lp.counter)?;
        rec.report = Some(report.clone());

        if report.passed() {
            lp.push(rec);
            return Ok(lp.finish(true, None));
        }
        if t >= budget {
            lp.push(rec);
            return Ok(lp.finish(false, None));
        }

        let next = t + 1;
        let rerun = if lp.config.has(Ablation::NoCritic) {
            if report.pass_syn {
                lp.push(rec);
                return Ok(lp.finish(false, None));
            }
            let feedback = format!(
                "The previous query failed to execute: {}. Return a corrected query.",
                report.interpreter.error_message.as_deref().unwrap_or("unknown error")
            );
            lp.push(rec);
            rerun_sql_with_feedback(state.clone(), &ctx, theta, &lp.counter, next, &feedback)
        } else {
            let critic_input = CriticInput {
                example_id: input.example_id,
                question: input.question,
                candidate: &candidate,
                report: &report,
                state: &state,
                proxy: input.proxy,
                iteration: t,
            };
            let crit = match critique(&critic_input, config.critic_mode, config.feedback_mode, &lp.counter).0 {
                Ok(c) => c,
                Err(RepairError::Gateway(e)) if e.is_fatal() => return Err(e),
                Err(e) => {
                    rec.error = Some(format!("critic: {e}"));
                    Critique { likely_stage: None, issues: Vec::new(), notes: vec![format!("critic failed: {e}")] }
                }
            };
            let localized = localize(&crit, &report);
            rec.critique = Some(crit.clone());
            rec.localized = localized;
            match localized {
                None => {
                    lp.push(rec);
                    return Ok(lp.finish(false, None));
                }
                Some(Localized { fallback: true, .. }) => {
                    lp.push(rec);
                    rerun_from(state.clone(), StageId::Sql, &ctx, theta, &lp.counter, next)
                }
                Some(Localized { stage, fallback: false }) => {
                    let target = refine_target(stage);
                    let refine_input = RefineInput {
                        example_id: input.example_id,
                        stage: target,
                        theta,
                        critique: &crit,
                        report: &report,
                    };
                    let (revision, _) = reflect(&refine_input, &lp.counter)?;
                    if revision.accepted {
                        if let Err(e) = commit(theta, &revision) {
                            rec.error = Some(e.to_string());
                        } else {
                            lp.commits += 1;
                            rec.refined_stage = Some(target);
                        }
                    }
                    rec.revision = Some(revision);
                    lp.push(rec);
                    let restart = match stage {
                        CriticStage::Stage3 => stage.restart_stage(),
                        _ => target,
                    };
                    rerun_from(state.clone(), restart, &ctx, theta, &lp.counter, next)
                }
            }
        };

        match rerun {
            Ok(s) => state = s,
            Err(failure) => {
                if let Some(e) = fatal(&failure) {
                    return Err(e);
                }
                let mut rec = lp.record(next, None);
                rec.error = Some(failure.to_string());
                lp.push(rec);
                return Ok(lp.finish(false, Some(failure.to_string())));
            }
        }
        t = next;
    }
}

/// Evaluates a fresh composition under the current Θ without refining.
fn passes_now(
    input: &SolveInput<'_>,
    theta: &StagePromptSet,
    config: &LoopConfig,
    gateway: &dyn ModelGateway,
) -> Result<bool, GatewayError> {
    let state = match compose(&input.ctx(), theta, gateway) {
        Ok(s) => s,
        Err(failure) => return fatal(&failure).map_or(Ok(false), Err),
    };
    let (Some(candidate), Some(plan)) = (&state.sql, &state.plan) else { return Ok(false) };
    let eval_input = EvalInput {
        example_id: input.example_id,
        question: input.question,
        candidate,
        plan,
        proxy: input.proxy,
        db: input.db,
        iteration: 0,
    };
    Ok(evaluate(&eval_input, &config.eval_options(), gateway)?.passed())
}

/// An example that passed before a Θ commit and fails after it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regression {
    pub example_id: String,
    /// The example whose refinement produced the breaking commit.
    pub caused_by: String,
    pub theta_versions: BTreeMap<StageId, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetOutcome {
    pub outcomes: Vec<Outcome>,
    pub regressions: Vec<Regression>,
    pub theta_commits: u32,
    /// Passing examples among those seen so far, taken after each commit.
    pub pass_counts_after_commit: Vec<usize>,
}

/// Solves examples of one database in order, evolving one Θ. After a
/// commit, earlier solved examples are re-checked when regression checking
/// is on.
pub fn solve_set(
    inputs: &[SolveInput<'_>],
    theta: &mut StagePromptSet,
    config: &LoopConfig,
    gateway: &dyn ModelGateway,
) -> Result<SetOutcome, GatewayError> {
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut passing: Vec<bool> = Vec::new();
    let mut regressions = Vec::new();
    let mut pass_counts = Vec::new();
    let mut commits = 0;
    for (j, input) in inputs.iter().enumerate() {
        let outcome = solve(input, theta, config, gateway)?;
        passing.push(outcome.solved);
        if outcome.theta_commits > 0 {
            commits += outcome.theta_commits;
            if config.regression_check {
                for i in 0..j {
                    if passing[i] && !passes_now(&inputs[i], theta, config, gateway)? {
                        passing[i] = false;
                        regressions.push(Regression {
                            example_id: inputs[i].example_id.to_string(),
                            caused_by: input.example_id.to_string(),
                            theta_versions: theta.versions(),
                        });
                    }
                }
            }
            pass_counts.push(passing.iter().filter(|p| **p).count());
        }
        outcomes.push(outcome);
    }
    Ok(SetOutcome { outcomes, regressions, theta_commits: commits, pass_counts_after_commit: pass_counts })
}

/// Writes one JSON line per iteration, then a summary line.
pub fn write_trace(path: &Path, outcome: &Outcome) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    for record in &outcome.trace {
        writeln!(file, "{}", serde_json::to_string(record).expect("records serialize"))?;
    }
    let summary = serde_json::json!({
        "outcome": {
            "example_id": outcome.example_id,
            "final_sql": outcome.final_sql.as_ref().map(|c| &c.text),
            "solved": outcome.solved,
            "iterations_used": outcome.iterations_used,
            "theta_commits": outcome.theta_commits,
            "error": outcome.error,
        }
    });
    writeln!(file, "{summary}")
}
