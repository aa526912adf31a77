//! Stage-level error attribution and localization.
//!
//! The critic reads an evaluation report with the stage outputs and names
//! the stage most likely responsible for a failure. Two implementations
//! share one contract: a model-backed critic using the shipped prompt, and a
//! deterministic rule-based critic for hermetic runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::gateway::{ModelGateway, ModelRequest};
use crate::judges::{extract_signature, EvalReport, Signature};
use crate::pipeline::{
    complete_with_repair, exact_keys, parse_object, resolve_attribute, ComparisonType, ContractError, PipelineState,
    RepairError, SqlCandidate,
};
use crate::prompts::{render_messages, CRITIC};
use crate::proxy::{render_context, ContextProxy};
use crate::stage::{CallTag, CriticStage};

/// Note emitted when nothing is wrong.
pub const ALL_CORRECT_NOTE: &str = "SQL is correct and semantically aligned with the question and schema.";

/// Closed set of criterion codes, each owned by one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    SchemaMissing,
    SchemaHallucination,
    FkAssumption,
    PredicateMapping,
    LiteralTyping,
    AggregationConstraint,
    SqlStructure,
    JoinMissing,
    OrderGroupHaving,
    SemanticMismatch,
    Stage1Leak,
}

impl Criterion {
    pub const ALL: [Criterion; 11] = [
        Criterion::SchemaMissing,
        Criterion::SchemaHallucination,
        Criterion::FkAssumption,
        Criterion::PredicateMapping,
        Criterion::LiteralTyping,
        Criterion::AggregationConstraint,
        Criterion::SqlStructure,
        Criterion::JoinMissing,
        Criterion::OrderGroupHaving,
        Criterion::SemanticMismatch,
        Criterion::Stage1Leak,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::SchemaMissing => "schema-missing",
            Criterion::SchemaHallucination => "schema-hallucination",
            Criterion::FkAssumption => "fk-assumption",
            Criterion::PredicateMapping => "predicate-mapping",
            Criterion::LiteralTyping => "literal-typing",
            Criterion::AggregationConstraint => "aggregation-constraint",
            Criterion::SqlStructure => "sql-structure",
            Criterion::JoinMissing => "join-missing",
            Criterion::OrderGroupHaving => "order-group-having",
            Criterion::SemanticMismatch => "semantic-mismatch",
            Criterion::Stage1Leak => "stage1-leak",
        }
    }

    pub fn stage(self) -> CriticStage {
        match self {
            Criterion::SchemaMissing | Criterion::SchemaHallucination | Criterion::FkAssumption => CriticStage::Stage1,
            Criterion::PredicateMapping | Criterion::LiteralTyping | Criterion::AggregationConstraint => {
                CriticStage::Stage2
            }
            Criterion::SqlStructure
            | Criterion::JoinMissing
            | Criterion::OrderGroupHaving
            | Criterion::SemanticMismatch
            | Criterion::Stage1Leak => CriticStage::Stage3,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Criterion::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| format!("unknown criterion `{s}`"))
    }
}

/// One localized finding `(stage, criterion, fragment)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub stage: CriticStage,
    pub criterion: Criterion,
    pub message: String,
    pub fragment: Option<String>,
}

impl Violation {
    fn new(criterion: Criterion, message: impl Into<String>, fragment: Option<String>) -> Self {
        Violation { stage: criterion.stage(), criterion, message: message.into(), fragment }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackMode {
    /// Pass/fail with at most a stage attribution.
    Coarse,
    /// Criterion codes and implicated SQL fragments.
    Granular,
    /// Assumption-level descriptions, no fragments.
    EpistemicOnly,
}

impl FeedbackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackMode::Coarse => "coarse",
            FeedbackMode::Granular => "granular",
            FeedbackMode::EpistemicOnly => "epistemic-only",
        }
    }
}

impl FromStr for FeedbackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coarse" => Ok(FeedbackMode::Coarse),
            "granular" => Ok(FeedbackMode::Granular),
            "epistemic-only" => Ok(FeedbackMode::EpistemicOnly),
            other => Err(format!("unknown feedback mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticMode {
    Rules,
    Model,
}

impl FromStr for CriticMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rules" => Ok(CriticMode::Rules),
            "model" => Ok(CriticMode::Model),
            other => Err(format!("unknown critic mode `{other}`")),
        }
    }
}

/// The critic contract: exactly `likely_stage`, `issues` and `notes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub likely_stage: Option<CriticStage>,
    pub issues: Vec<String>,
    pub notes: Vec<String>,
}

impl Critique {
    pub fn all_correct() -> Self {
        Critique { likely_stage: None, issues: Vec::new(), notes: vec![ALL_CORRECT_NOTE.to_string()] }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("critiques serialize")
    }

    /// SHA-256 of the serialized critique, recorded with Θ revisions.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

const CRITIQUE_KEYS: [&str; 3] = ["likely_stage", "issues", "notes"];

fn strings(key: &str, v: Option<&Value>, reasons: &mut Vec<String>) -> Vec<String> {
    match v {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|i| match i {
                Value::String(s) => Some(s.clone()),
                other => {
                    reasons.push(format!("\"{key}\" items must be strings, found {other}"));
                    None
                }
            })
            .collect(),
        Some(other) => {
            reasons.push(format!("\"{key}\" must be a list, found {other}"));
            Vec::new()
        }
        None => Vec::new(),
    }
}

/// Parses the critic model's reply under its strict contract.
pub fn parse_critique(text: &str) -> Result<Critique, ContractError> {
    const C: &str = "critic";
    let (map, _) = parse_object(C, text)?;
    let mut reasons = Vec::new();
    exact_keys(&map, &CRITIQUE_KEYS, &mut reasons);
    let likely_stage = match map.get("likely_stage") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => match s.parse::<CriticStage>() {
            Ok(stage) => Some(stage),
            Err(_) => {
                reasons.push(format!("\"likely_stage\" must be stage1, stage2, stage3 or null, found \"{s}\""));
                None
            }
        },
        Some(other) => {
            reasons.push(format!("\"likely_stage\" must be a string or null, found {other}"));
            None
        }
    };
    let issues = strings("issues", map.get("issues"), &mut reasons);
    let notes = strings("notes", map.get("notes"), &mut reasons);
    if likely_stage.is_none() && !issues.is_empty() && reasons.is_empty() {
        reasons.push("likely_stage is null but issues were reported".into());
    }
    if reasons.is_empty() {
        Ok(Critique { likely_stage, issues, notes })
    } else {
        Err(ContractError { contract: C, reasons })
    }
}

/// Everything the critic inspects for one candidate.
#[derive(Debug, Clone, Copy)]
pub struct CriticInput<'a> {
    pub example_id: &'a str,
    pub question: &'a str,
    pub candidate: &'a SqlCandidate,
    pub report: &'a EvalReport,
    pub state: &'a PipelineState,
    pub proxy: &'a ContextProxy,
    /// Loop iteration; keys scripted critic responses.
    pub iteration: u32,
}

fn table_of_column(proxy: &ContextProxy, column_ref: &str) -> Option<String> {
    resolve_attribute(proxy, column_ref).map(|d| d.table.clone())
}

/// Deterministic findings, in no particular order. Only evidence produces
/// findings: an empty database or extra Stage 1 attributes never do.
pub fn rule_violations(input: &CriticInput<'_>) -> Vec<Violation> {
    let mut out = Vec::new();
    let report = input.report;
    let proxy = input.proxy;
    let selection = input.state.stage1.as_ref();
    let selected = |table: &str| selection.is_some_and(|s| s.has_table(table));
    let signature: Option<Signature> = extract_signature(&input.candidate.text).ok();

    // Stage 1: a table that later stages depend on was never surfaced.
    let mut required: BTreeMap<String, String> = BTreeMap::new();
    if let Some(plan) = &input.state.plan {
        for entity in &plan.entities {
            if let Some(t) = proxy.resolve_table(entity) {
                required.entry(t.to_string()).or_insert_with(|| format!("plan entity {entity}"));
            }
        }
    }
    if let Some(signals) = &input.state.stage2 {
        for col in signals.literals.iter().filter_map(|l| l.column_candidate.as_deref()) {
            if col.contains('.') {
                if let Some(t) = table_of_column(proxy, col) {
                    required.entry(t).or_insert_with(|| format!("signal column {col}"));
                }
            }
        }
    }
    if selection.is_some() {
        for (table, why) in &required {
            if !selected(table) {
                out.push(Violation::new(
                    Criterion::SchemaMissing,
                    format!("table {table} is required by the {why} but missing from Stage 1"),
                    Some(table.clone()),
                ));
            }
        }
    }

    // Stage 2: signals that point at nothing, or numeric comparisons without a number.
    if let Some(signals) = &input.state.stage2 {
        for lit in &signals.literals {
            let Some(col) = lit.column_candidate.as_deref() else { continue };
            match resolve_attribute(proxy, col) {
                None => out.push(Violation::new(
                    Criterion::PredicateMapping,
                    format!("signal column {col} does not exist"),
                    Some(lit.raw_expression.clone()),
                )),
                Some(d)
                    if d.is_numeric()
                        && matches!(lit.comparison_type, ComparisonType::Comparative | ComparisonType::Range)
                        && !lit.raw_expression.chars().any(|c| c.is_ascii_digit()) =>
                {
                    out.push(Violation::new(
                        Criterion::LiteralTyping,
                        format!("numeric column {col} compared against non-numeric value"),
                        Some(lit.raw_expression.clone()),
                    ))
                }
                Some(_) => {}
            }
        }
    }

    // Stage 3.
    if !report.interpreter.exec_ok {
        let message = report.interpreter.error_message.clone().unwrap_or_else(|| "SQL did not execute".into());
        out.push(Violation::new(Criterion::SqlStructure, message, Some(input.candidate.text.clone())));
    }
    if let Some(sig) = &signature {
        for table in &sig.tables {
            if proxy.resolve_table(table).is_some() && selection.is_some() && !selected(table) {
                out.push(Violation::new(
                    Criterion::Stage1Leak,
                    format!("SQL references {table}, which Stage 1 did not surface"),
                    Some(table.clone()),
                ));
            }
        }
        if let Some(plan) = &input.state.plan {
            let needed = plan.entities.len().max(if plan.joins.is_empty() { 0 } else { 2 });
            if needed > 1 && sig.tables.len() < needed {
                out.push(Violation::new(
                    Criterion::JoinMissing,
                    format!("plan spans {needed} tables but the SQL reads {}", sig.tables.len()),
                    None,
                ));
            }
        }
    }
    for missing in &report.coverage_missing {
        let (kind, detail) = missing.split_once(": ").unwrap_or((missing.as_str(), ""));
        let criterion = match kind {
            "grouping" | "order" | "limit" => Criterion::OrderGroupHaving,
            "distinct" | "signature" => Criterion::SqlStructure,
            _ => Criterion::SemanticMismatch,
        };
        let detail = if detail.is_empty() { None } else { Some(detail.to_string()) };
        out.push(Violation::new(criterion, format!("plan constraint not expressed: {missing}"), detail));
    }
    if report.pass_syn
        && !report.pass_sem
        && report.coverage_missing.is_empty()
        && !out.iter().any(|v| v.stage == CriticStage::Stage3)
    {
        out.push(Violation::new(Criterion::SemanticMismatch, report.semantic.rationale.clone(), None));
    }
    out
}

/// Formats violations under a feedback mode. The earliest implicated stage
/// wins; only violations of that stage are reported.
pub fn critique_from_violations(violations: &[Violation], mode: FeedbackMode) -> Critique {
    let Some(stage) = violations.iter().map(|v| v.stage).min() else {
        return Critique::all_correct();
    };
    let mut issues = Vec::new();
    let mut notes = Vec::new();
    for v in violations {
        if v.stage != stage {
            notes.push(format!("also observed at {}: {}", v.stage, v.criterion));
            continue;
        }
        let issue = match mode {
            FeedbackMode::Coarse => format!("fail: {stage}"),
            FeedbackMode::Granular => match &v.fragment {
                Some(f) => format!("[{}] {} :: {f}", v.criterion, v.message),
                None => format!("[{}] {}", v.criterion, v.message),
            },
            FeedbackMode::EpistemicOnly => format!("[assumption:{}] {}", v.criterion, v.message),
        };
        if !issues.contains(&issue) {
            issues.push(issue);
        }
    }
    if mode == FeedbackMode::Coarse {
        notes.clear();
    }
    Critique { likely_stage: Some(stage), issues, notes }
}

/// Reshapes a model critique to the feedback mode.
fn reshape(critique: Critique, mode: FeedbackMode) -> Critique {
    match (mode, critique.likely_stage) {
        (FeedbackMode::Granular, _) | (_, None) => critique,
        (FeedbackMode::Coarse, Some(stage)) => {
            Critique { likely_stage: Some(stage), issues: vec![format!("fail: {stage}")], notes: Vec::new() }
        }
        (FeedbackMode::EpistemicOnly, Some(stage)) => Critique {
            likely_stage: Some(stage),
            issues: critique
                .issues
                .iter()
                .map(|i| format!("[assumption] {}", i.split(" :: ").next().unwrap_or(i).trim()))
                .collect(),
            notes: critique.notes,
        },
    }
}

/// Produces a contract-valid critique and the number of model calls made.
pub fn critique(
    input: &CriticInput<'_>,
    mode: CriticMode,
    feedback: FeedbackMode,
    gateway: &dyn ModelGateway,
) -> (Result<Critique, RepairError>, usize) {
    match mode {
        CriticMode::Rules => (Ok(critique_from_violations(&rule_violations(input), feedback)), 0),
        CriticMode::Model => {
            let json = |v: Option<String>| v.unwrap_or_else(|| "null".into());
            let schema = render_context(input.proxy, None).unwrap_or_default();
            let values = BTreeMap::from([
                ("question", input.question.to_string()),
                ("schema", schema),
                ("sql", input.candidate.text.clone()),
                ("stage1", json(input.state.output_json(crate::StageId::Stage1))),
                ("stage2", json(input.state.output_json(crate::StageId::Stage2))),
                ("analysis", serde_json::to_string_pretty(input.report).expect("reports serialize")),
            ]);
            let rendered = render_messages(CRITIC, &values).expect("shipped critic prompt renders");
            let request = ModelRequest::new(CallTag::Critic, rendered.system, rendered.user)
                .with_key(input.example_id, input.iteration);
            let (result, calls) = complete_with_repair(gateway, &request, parse_critique);
            (result.map(|c| reshape(c, feedback)), calls)
        }
    }
}

/// The stage to refine, and whether it came from the fallback rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Localized {
    pub stage: CriticStage,
    pub fallback: bool,
}

/// The critique's stage when set; Stage 3 when the critique names none but
/// a judge failed; nothing when both judges passed.
pub fn localize(critique: &Critique, report: &EvalReport) -> Option<Localized> {
    match critique.likely_stage {
        Some(stage) => Some(Localized { stage, fallback: false }),
        None if !report.passed() => Some(Localized { stage: CriticStage::Stage3, fallback: true }),
        None => None,
    }
}
