//! Prompt revision for the implicated stage, with validation and rollback.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::critic::Critique;
use crate::gateway::{GatewayError, ModelGateway, ModelRequest};
use crate::judges::EvalReport;
use crate::pipeline::{complete_with_repair, exact_keys, parse_object, ContractError, RepairError, StagePromptSet, ThetaError};
use crate::prompts::{invocation_headers, render_messages, required_placeholders, PROTECTED_HEADERS, REFINER};
use crate::stage::{CallTag, CriticStage, StageId};
use crate::template::{placeholder_counts, stray_braces};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRevision {
    pub stage: StageId,
    pub old_version: u32,
    pub new_prompt: String,
    pub explanation: String,
    pub accepted: bool,
    pub rejection_reasons: Vec<String>,
    pub critique_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommitError {
    #[error("revision for {0} was rejected and cannot be committed")]
    Rejected(StageId),
    #[error(transparent)]
    Theta(#[from] ThetaError),
}

/// The refiner's reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinerOutput {
    pub new_prompt: String,
    pub explanation: String,
}

const REFINER_KEYS: [&str; 2] = ["new_prompt", "explanation"];

pub fn parse_refiner_output(text: &str) -> Result<RefinerOutput, ContractError> {
    const C: &str = "refiner";
    let (map, _) = parse_object(C, text)?;
    let mut reasons = Vec::new();
    exact_keys(&map, &REFINER_KEYS, &mut reasons);
    let mut field = |key: &str| match map.get(key) {
        Some(Value::String(s)) => s.clone(),
        Some(other) => {
            reasons.push(format!("\"{key}\" must be a string, found {other}"));
            String::new()
        }
        None => String::new(),
    };
    let new_prompt = field("new_prompt");
    let explanation = field("explanation");
    if reasons.is_empty() {
        Ok(RefinerOutput { new_prompt, explanation })
    } else {
        Err(ContractError { contract: C, reasons })
    }
}

fn count(haystack: &str, needle: &str) -> usize {
    haystack.matches(needle).count()
}

/// Every rule the revised prompt breaks, in check order: placeholders,
/// headers, brace safety, emptiness.
pub fn validate_prompt(new_prompt: &str, stage: StageId, original: &str) -> Vec<String> {
    let mut out = Vec::new();
    let old_counts = placeholder_counts(original);
    let new_counts = placeholder_counts(new_prompt);
    let mut names: Vec<&str> = old_counts.keys().copied().collect();
    for name in required_placeholders(stage) {
        if !names.contains(name) {
            names.push(name);
        }
    }
    for name in names {
        let want = old_counts.get(name).copied().unwrap_or(1);
        match new_counts.get(name).copied().unwrap_or(0) {
            0 => out.push(format!("missing placeholder {{{name}}}")),
            n if n != want => out.push(format!("placeholder {{{name}}} appears {n} times, expected {want}")),
            _ => {}
        }
    }
    for header in PROTECTED_HEADERS.iter().chain(invocation_headers(stage)) {
        let want = count(original, header);
        if want > 0 && count(new_prompt, header) < want {
            out.push(format!("header \"{header}\" not preserved verbatim"));
        }
    }
    for name in new_counts.keys() {
        if !old_counts.contains_key(name) {
            out.push(format!("unknown placeholder {{{name}}}"));
        }
    }
    for (offset, fragment) in stray_braces(new_prompt) {
        out.push(format!("unescaped brace at byte {offset}: `{fragment}`"));
    }
    if new_prompt.trim().is_empty() {
        out.push("new prompt is empty".into());
    }
    out
}

/// Which prompt a localized stage revises. Stage 3 spans planning and SQL
/// writing; its revisions go to the SQL prompt, and its restart still
/// begins at planning.
pub fn refine_target(stage: CriticStage) -> StageId {
    match stage {
        CriticStage::Stage1 => StageId::Stage1,
        CriticStage::Stage2 => StageId::Stage2,
        CriticStage::Stage3 => StageId::Sql,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefineInput<'a> {
    pub example_id: &'a str,
    pub stage: StageId,
    pub theta: &'a StagePromptSet,
    pub critique: &'a Critique,
    pub report: &'a EvalReport,
}

fn critique_payload(critique: &Critique, report: &EvalReport) -> String {
    let payload = json!({
        "likely_stage": critique.likely_stage,
        "issues": critique.issues,
        "notes": critique.notes,
        "report": {
            "pass_syn": report.pass_syn,
            "pass_sem": report.pass_sem,
            "error_message": report.interpreter.error_message,
            "coverage_missing": report.coverage_missing,
        },
    });
    serde_json::to_string_pretty(&payload).expect("payload serializes")
}

/// Asks the refiner for a revised prompt and validates it; one retry with
/// the rejection reasons appended. Θ is never touched here. Returns the
/// revision and the number of model calls made.
pub fn reflect(input: &RefineInput<'_>, gateway: &dyn ModelGateway) -> Result<(PromptRevision, usize), GatewayError> {
    let original = input.theta.text(input.stage);
    let old_version = input.theta.version(input.stage);
    let values = BTreeMap::from([
        ("stage", input.stage.as_str().to_string()),
        ("original_prompt", original.to_string()),
        ("critique_json", critique_payload(input.critique, input.report)),
    ]);
    let rendered = render_messages(REFINER, &values).expect("shipped refiner prompt renders");
    let base = ModelRequest::new(CallTag::Refiner, rendered.system, rendered.user).with_key(input.example_id, old_version);
    let mut revision = PromptRevision {
        stage: input.stage,
        old_version,
        new_prompt: String::new(),
        explanation: String::new(),
        accepted: false,
        rejection_reasons: Vec::new(),
        critique_digest: input.critique.digest(),
    };
    let mut calls = 0;
    let mut request = base.clone();
    for attempt in 0..2 {
        let (result, n) = complete_with_repair(gateway, &request, parse_refiner_output);
        calls += n;
        let reasons = match result {
            Ok(out) => {
                let reasons = validate_prompt(&out.new_prompt, input.stage, original);
                revision.new_prompt = out.new_prompt;
                revision.explanation = out.explanation;
                reasons
            }
            Err(RepairError::Gateway(e)) => return Err(e),
            Err(RepairError::Contract(e)) => e.reasons.iter().map(|r| format!("refiner contract: {r}")).collect(),
        };
        if reasons.is_empty() {
            revision.accepted = true;
            revision.rejection_reasons.clear();
            return Ok((revision, calls));
        }
        tracing::debug!(stage = %input.stage, attempt, ?reasons, "revision rejected");
        revision.rejection_reasons = reasons;
        request = base.clone();
        request.user_text.push_str("\n\nYour previous revision was rejected:\n");
        for r in &revision.rejection_reasons {
            request.user_text.push_str("- ");
            request.user_text.push_str(r);
            request.user_text.push('\n');
        }
    }
    Ok((revision, calls))
}

/// Applies an accepted revision: only its stage changes, by one version.
pub fn commit(theta: &mut StagePromptSet, revision: &PromptRevision) -> Result<u32, CommitError> {
    if !revision.accepted {
        return Err(CommitError::Rejected(revision.stage));
    }
    Ok(theta.replace(
        revision.stage,
        revision.old_version,
        revision.new_prompt.clone(),
        revision.critique_digest.clone(),
        revision.explanation.clone(),
    )?)
}
