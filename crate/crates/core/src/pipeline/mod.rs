//! The four generation stages, composed and selectively rerun.
//!
//! Each stage renders its prompt from Θ, calls the gateway once, and parses
//! the reply under its output contract. A contract failure earns exactly one
//! repair call with [`REPAIR_SENTENCE`] appended to the user message; the
//! sentence never enters Θ.

mod contracts;
mod theta;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use contracts::{
    exact_keys, normalize_sql, parse_object, parse_schema_selection, parse_semantic_plan, parse_signal_set,
    resolve_attribute, split_statements, strip_code_fence, table_set, Cardinality, ComparisonType, ContractError,
    Direction, LiteralSignal, Normalization, SchemaSelection, SemanticPlan, SignalSet, SqlCandidate, PLAN_KEYS,
};
pub use theta::{load_theta, save_theta, RevisionRecord, StagePrompt, StagePromptSet, ThetaError, ThetaStore};

use crate::gateway::{GatewayError, ModelGateway, ModelRequest};
use crate::prompts::render_messages;
use crate::proxy::{render_context, ContextProxy};
use crate::stage::{CallTag, StageId};
use crate::template::TemplateError;

pub const REPAIR_SENTENCE: &str = "Your previous output violated the JSON contract; emit strict JSON only.";

/// Filler for optional slots with no content.
const NONE_TEXT: &str = "None";

/// Per-question inputs shared by every stage.
#[derive(Debug, Clone, Copy)]
pub struct QuestionContext<'a> {
    pub example_id: &'a str,
    pub question: &'a str,
    pub evidence: Option<&'a str>,
    pub proxy: &'a ContextProxy,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StageErrorKind {
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("prompt cannot be rendered: {0}")]
    Prompt(#[from] TemplateError),
    #[error("stage input unavailable: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage}: {kind}")]
pub struct StageError {
    pub stage: StageId,
    pub kind: StageErrorKind,
}

impl StageError {
    pub fn is_fatal(&self) -> bool {
        matches!(&self.kind, StageErrorKind::Gateway(g) if g.is_fatal())
    }
}

/// Outputs of all stages run so far, plus the Θ versions that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub stage1: Option<SchemaSelection>,
    pub stage2: Option<SignalSet>,
    pub plan: Option<SemanticPlan>,
    pub sql: Option<SqlCandidate>,
    pub versions: BTreeMap<StageId, u32>,
    /// Normalization events, in the order they happened.
    pub normalizations: Vec<String>,
    /// Gateway calls spent building this state, repairs included.
    pub calls: usize,
}

impl PipelineState {
    pub fn is_complete(&self) -> bool {
        self.stage1.is_some() && self.stage2.is_some() && self.plan.is_some() && self.sql.is_some()
    }

    fn clear_from(&mut self, stage: StageId) {
        for s in stage.downstream() {
            match s {
                StageId::Stage1 => self.stage1 = None,
                StageId::Stage2 => self.stage2 = None,
                StageId::Plan => self.plan = None,
                StageId::Sql => self.sql = None,
            }
            self.versions.remove(s);
        }
    }

    fn has_output(&self, stage: StageId) -> bool {
        match stage {
            StageId::Stage1 => self.stage1.is_some(),
            StageId::Stage2 => self.stage2.is_some(),
            StageId::Plan => self.plan.is_some(),
            StageId::Sql => self.sql.is_some(),
        }
    }

    /// Serialized output of one stage, for byte-level comparisons.
    pub fn output_json(&self, stage: StageId) -> Option<String> {
        match stage {
            StageId::Stage1 => self.stage1.as_ref().map(to_json),
            StageId::Stage2 => self.stage2.as_ref().map(to_json),
            StageId::Plan => self.plan.as_ref().map(to_json),
            StageId::Sql => self.sql.as_ref().map(to_json),
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("stage outputs always serialize")
}

/// Composition stopped at `error.stage`; `state` keeps every earlier output.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct PipelineFailure {
    pub state: PipelineState,
    pub error: StageError,
}

struct Call<'a> {
    stage: StageId,
    ctx: &'a QuestionContext<'a>,
    theta: &'a StagePromptSet,
    gateway: &'a dyn ModelGateway,
    values: BTreeMap<&'static str, String>,
    extra_user: Option<&'a str>,
}

impl Call<'_> {
    /// Calls the model and parses its reply, with one repair attempt.
    fn run<T>(
        self,
        state: &mut PipelineState,
        parse: impl Fn(&str) -> Result<(T, Vec<Normalization>), ContractError>,
    ) -> Result<T, StageError> {
        let err = |kind: StageErrorKind| StageError { stage: self.stage, kind };
        let rendered = render_messages(self.theta.text(self.stage), &self.values).map_err(|e| err(e.into()))?;
        let mut user = rendered.user;
        if let Some(extra) = self.extra_user {
            user.push_str("\n\n");
            user.push_str(extra);
        }
        let version = self.theta.version(self.stage);
        let request = ModelRequest::new(CallTag::Stage(self.stage), rendered.system, user)
            .with_key(self.ctx.example_id, version);

        state.calls += 1;
        let first = self.gateway.complete(&request).map_err(|e| err(e.into()))?;
        let first_err = match parse(&first.text) {
            Ok((value, notes)) => {
                state.normalizations.extend(notes.into_iter().map(|n| n.0));
                return Ok(value);
            }
            Err(e) => e,
        };
        tracing::debug!(stage = %self.stage, error = %first_err, "contract violation, issuing repair call");
        let mut repair = request.clone();
        repair.user_text.push_str("\n\n");
        repair.user_text.push_str(REPAIR_SENTENCE);
        state.calls += 1;
        let second = self.gateway.complete(&repair).map_err(|e| err(e.into()))?;
        match parse(&second.text) {
            Ok((value, notes)) => {
                state.normalizations.push(format!("{}: repaired after contract violation", self.stage));
                state.normalizations.extend(notes.into_iter().map(|n| n.0));
                Ok(value)
            }
            Err(e) => Err(err(e.into())),
        }
    }
}

/// Outcome of [`complete_with_repair`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RepairError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Contract(#[from] ContractError),
}

/// Sends `request` and parses the reply; on a contract violation sends it
/// once more with [`REPAIR_SENTENCE`] appended. Returns the value and the
/// number of calls made.
pub fn complete_with_repair<T>(
    gateway: &dyn ModelGateway,
    request: &ModelRequest,
    parse: impl Fn(&str) -> Result<T, ContractError>,
) -> (Result<T, RepairError>, usize) {
    let first = match gateway.complete(request) {
        Ok(r) => r,
        Err(e) => return (Err(e.into()), 1),
    };
    let first_err = match parse(&first.text) {
        Ok(v) => return (Ok(v), 1),
        Err(e) => e,
    };
    tracing::debug!(tag = request.stage_tag.as_str(), error = %first_err, "contract violation, issuing repair call");
    let mut repair = request.clone();
    repair.user_text.push_str("\n\n");
    repair.user_text.push_str(REPAIR_SENTENCE);
    let second = match gateway.complete(&repair) {
        Ok(r) => r,
        Err(e) => return (Err(e.into()), 2),
    };
    (parse(&second.text).map_err(RepairError::from), 2)
}

fn evidence(ctx: &QuestionContext<'_>) -> String {
    ctx.evidence.filter(|e| !e.trim().is_empty()).unwrap_or(NONE_TEXT).to_string()
}

fn selected_context(ctx: &QuestionContext<'_>, stage: StageId, sel: &SchemaSelection) -> Result<String, StageError> {
    render_context(ctx.proxy, Some(sel)).map_err(|e| StageError { stage, kind: StageErrorKind::Input(e.to_string()) })
}

fn missing(stage: StageId, what: &str) -> StageError {
    StageError { stage, kind: StageErrorKind::Input(format!("{what} output is missing")) }
}

fn run_one(
    state: &mut PipelineState,
    stage: StageId,
    ctx: &QuestionContext<'_>,
    theta: &StagePromptSet,
    gateway: &dyn ModelGateway,
    iteration: u32,
    sql_feedback: Option<&str>,
) -> Result<(), StageError> {
    let mut values: BTreeMap<&'static str, String> = BTreeMap::new();
    values.insert("question", ctx.question.to_string());
    let call = |values, extra_user| Call { stage, ctx, theta, gateway, values, extra_user };
    match stage {
        StageId::Stage1 => {
            let schema = render_context(ctx.proxy, None)
                .map_err(|e| StageError { stage, kind: StageErrorKind::Input(e.to_string()) })?;
            values.insert("schema", schema);
            values.insert("extra_evidence", evidence(ctx));
            let out = call(values, None).run(state, |t| parse_schema_selection(t, ctx.proxy))?;
            state.stage1 = Some(out);
        }
        StageId::Stage2 => {
            let s1 = state.stage1.clone().ok_or_else(|| missing(stage, "stage1"))?;
            values.insert("stage1", to_json(&s1));
            values.insert("extra_db_info", selected_context(ctx, stage, &s1)?);
            let out = call(values, None).run(state, parse_signal_set)?;
            state.stage2 = Some(out);
        }
        StageId::Plan => {
            let s1 = state.stage1.as_ref().ok_or_else(|| missing(stage, "stage1"))?;
            let s2 = state.stage2.as_ref().ok_or_else(|| missing(stage, "stage2"))?;
            values.insert("stage1", to_json(s1));
            values.insert("stage2", to_json(s2));
            let out = call(values, None).run(state, |t| parse_semantic_plan(t, ctx.proxy))?;
            state.plan = Some(out);
        }
        StageId::Sql => {
            let s1 = state.stage1.clone().ok_or_else(|| missing(stage, "stage1"))?;
            let plan = state.plan.as_ref().ok_or_else(|| missing(stage, "plan"))?;
            values.insert("semantic_plan", to_json(plan));
            values.insert("extra_db_info", selected_context(ctx, stage, &s1)?);
            values.insert("extra_evidence", evidence(ctx));
            let out = call(values, sql_feedback).run(state, |t| SqlCandidate::parse(t, iteration))?;
            state.sql = Some(out);
        }
    }
    state.versions.insert(stage, theta.version(stage));
    Ok(())
}

fn run_from(
    mut state: PipelineState,
    from: StageId,
    ctx: &QuestionContext<'_>,
    theta: &StagePromptSet,
    gateway: &dyn ModelGateway,
    iteration: u32,
    sql_feedback: Option<&str>,
) -> Result<PipelineState, PipelineFailure> {
    if let Some(&prev) = StageId::ALL.get(from.index().wrapping_sub(1)) {
        if !state.has_output(prev) {
            let error = missing(from, prev.as_str());
            return Err(PipelineFailure { state, error });
        }
    }
    state.clear_from(from);
    for &stage in from.downstream() {
        if let Err(error) = run_one(&mut state, stage, ctx, theta, gateway, iteration, sql_feedback) {
            return Err(PipelineFailure { state, error });
        }
    }
    Ok(state)
}

/// Runs all four stages in order.
pub fn compose(
    ctx: &QuestionContext<'_>,
    theta: &StagePromptSet,
    gateway: &dyn ModelGateway,
) -> Result<PipelineState, PipelineFailure> {
    run_from(PipelineState::default(), StageId::Stage1, ctx, theta, gateway, 0, None)
}

/// Reruns `stage` and everything downstream; earlier outputs are kept as is.
/// The `calls` counter keeps accumulating across reruns.
pub fn rerun_from(
    state: PipelineState,
    stage: StageId,
    ctx: &QuestionContext<'_>,
    theta: &StagePromptSet,
    gateway: &dyn ModelGateway,
    iteration: u32,
) -> Result<PipelineState, PipelineFailure> {
    run_from(state, stage, ctx, theta, gateway, iteration, None)
}

/// Reruns only the SQL stage with `feedback` appended to its user message.
/// The feedback is not written into Θ.
pub fn rerun_sql_with_feedback(
    state: PipelineState,
    ctx: &QuestionContext<'_>,
    theta: &StagePromptSet,
    gateway: &dyn ModelGateway,
    iteration: u32,
    feedback: &str,
) -> Result<PipelineState, PipelineFailure> {
    run_from(state, StageId::Sql, ctx, theta, gateway, iteration, Some(feedback))
}
