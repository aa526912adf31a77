//! Unsupervised evaluation of a SQL candidate: an interpreter judge, a
//! semantic judge, and a coverage check of the plan against the SQL.

mod coverage;
mod interpreter;
mod signature;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use coverage::{canonical_literal, coverage_check, parse_filter_text, plan_aggregations, plan_filters, PlanFilter, UNANALYZABLE};
pub use interpreter::{judge_syntax, InterpreterVerdict};
pub use signature::{
    extract_signature, normalize_term, parse_query, render_term, Aggregate, OpClass, OrderTerm, Predicate, Signature,
    SignatureError, AGGREGATES,
};

use crate::db::{DbHandle, JUDGE_TIMEOUT};
use crate::gateway::{GatewayError, ModelGateway, ModelRequest};
use crate::pipeline::{complete_with_repair, exact_keys, parse_object, ContractError, RepairError, SemanticPlan, SqlCandidate};
use crate::prompts::{render_messages, JUDGE};
use crate::proxy::{render_context, ContextProxy};
use crate::stage::CallTag;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticVerdict {
    pub intent_preserved: bool,
    pub missing_constraints: Vec<String>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub interpreter: InterpreterVerdict,
    pub semantic: SemanticVerdict,
    pub pass_syn: bool,
    pub pass_sem: bool,
    pub coverage_missing: Vec<String>,
}

impl EvalReport {
    pub fn passed(&self) -> bool {
        self.pass_syn && self.pass_sem
    }
}

/// How the semantic verdict is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    /// Derived from the coverage check alone; no model call.
    Stub,
    /// Asked of the model under the judge contract.
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub judge_mode: JudgeMode,
    /// When false, the semantic judge is skipped and `pass_sem` is forced.
    pub semantic_checker: bool,
    /// When false, `elapsed_ms` is reported as 0 so traces stay reproducible.
    pub record_timings: bool,
    pub timeout: Duration,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { judge_mode: JudgeMode::Stub, semantic_checker: true, record_timings: false, timeout: JUDGE_TIMEOUT }
    }
}

/// Everything a judge may look at for one candidate.
#[derive(Debug, Clone, Copy)]
pub struct EvalInput<'a> {
    pub example_id: &'a str,
    pub question: &'a str,
    pub candidate: &'a SqlCandidate,
    pub plan: &'a SemanticPlan,
    pub proxy: &'a ContextProxy,
    pub db: &'a DbHandle,
    /// Loop iteration; keys scripted judge responses.
    pub iteration: u32,
}

const JUDGE_KEYS: [&str; 3] = ["intent_preserved", "missing_constraints", "rationale"];

/// Parses the judge model's reply under its strict contract.
pub fn parse_semantic_verdict(text: &str) -> Result<SemanticVerdict, ContractError> {
    const C: &str = "judge";
    let (map, _) = parse_object(C, text)?;
    let mut reasons = Vec::new();
    exact_keys(&map, &JUDGE_KEYS, &mut reasons);
    let intent = match map.get("intent_preserved") {
        Some(Value::Bool(b)) => Some(*b),
        Some(other) => {
            reasons.push(format!("\"intent_preserved\" must be a boolean, found {other}"));
            None
        }
        None => None,
    };
    let missing: Vec<String> = match map.get("missing_constraints") {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|v| match v {
                Value::String(s) => Some(s.clone()),
                other => {
                    reasons.push(format!("\"missing_constraints\" items must be strings, found {other}"));
                    None
                }
            })
            .collect(),
        Some(other) => {
            reasons.push(format!("\"missing_constraints\" must be a list, found {other}"));
            Vec::new()
        }
        None => Vec::new(),
    };
    let rationale = match map.get("rationale") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => {
            reasons.push(format!("\"rationale\" must be a string, found {other}"));
            String::new()
        }
        None => String::new(),
    };
    if intent == Some(true) && !missing.is_empty() {
        reasons.push("intent_preserved is true but missing_constraints is not empty".into());
    }
    match intent {
        Some(intent_preserved) if reasons.is_empty() => {
            Ok(SemanticVerdict { intent_preserved, missing_constraints: missing, rationale })
        }
        _ => Err(ContractError { contract: C, reasons }),
    }
}

/// Verdict from the coverage check alone.
pub fn stub_verdict(coverage_missing: &[String]) -> SemanticVerdict {
    if coverage_missing.is_empty() {
        SemanticVerdict {
            intent_preserved: true,
            missing_constraints: Vec::new(),
            rationale: "every plan constraint appears in the SQL".into(),
        }
    } else {
        SemanticVerdict {
            intent_preserved: false,
            missing_constraints: coverage_missing.to_vec(),
            rationale: format!("{} plan constraint(s) missing from the SQL", coverage_missing.len()),
        }
    }
}

/// Asks the judge model whether the candidate preserves the question's
/// intent. Returns the verdict and the number of model calls made.
pub fn judge_semantics(
    input: &EvalInput<'_>,
    gateway: &dyn ModelGateway,
) -> (Result<SemanticVerdict, RepairError>, usize) {
    let schema = match render_context(input.proxy, None) {
        Ok(s) => s,
        Err(e) => {
            let err = ContractError { contract: "judge", reasons: vec![format!("schema unavailable: {e}")] };
            return (Err(err.into()), 0);
        }
    };
    let values = BTreeMap::from([
        ("question", input.question.to_string()),
        ("schema", schema),
        ("plan", serde_json::to_string_pretty(input.plan).expect("plans serialize")),
        ("sql", input.candidate.text.clone()),
    ]);
    let rendered = render_messages(JUDGE, &values).expect("shipped judge prompt renders");
    let request =
        ModelRequest::new(CallTag::Judge, rendered.system, rendered.user).with_key(input.example_id, input.iteration);
    complete_with_repair(gateway, &request, parse_semantic_verdict)
}

/// Runs both judges and the coverage check. Only gateway errors escape;
/// every other failure is part of the report. The model judge is never
/// called for a candidate that does not parse.
pub fn evaluate(input: &EvalInput<'_>, options: &EvalOptions, gateway: &dyn ModelGateway) -> Result<EvalReport, GatewayError> {
    let interpreter = judge_syntax(input.candidate, input.db, options.timeout, options.record_timings);
    let pass_syn = interpreter.exec_ok;
    if !interpreter.parse_ok {
        let semantic =
            SemanticVerdict { intent_preserved: false, missing_constraints: Vec::new(), rationale: "syntax failed".into() };
        return Ok(EvalReport { interpreter, semantic, pass_syn, pass_sem: false, coverage_missing: Vec::new() });
    }
    if !options.semantic_checker {
        let semantic = SemanticVerdict {
            intent_preserved: true,
            missing_constraints: Vec::new(),
            rationale: "semantic checker disabled".into(),
        };
        return Ok(EvalReport { interpreter, semantic, pass_syn, pass_sem: true, coverage_missing: Vec::new() });
    }
    let coverage_missing = match extract_signature(&input.candidate.text) {
        Ok(sig) => coverage_check(input.plan, &sig),
        Err(_) => vec![UNANALYZABLE.to_string()],
    };
    let semantic = match options.judge_mode {
        JudgeMode::Stub => stub_verdict(&coverage_missing),
        JudgeMode::Model => match judge_semantics(input, gateway).0 {
            Ok(v) => v,
            Err(RepairError::Gateway(e)) => return Err(e),
            Err(RepairError::Contract(e)) => SemanticVerdict {
                intent_preserved: false,
                missing_constraints: Vec::new(),
                rationale: format!("judge output rejected: {e}"),
            },
        },
    };
    let pass_sem = semantic.intent_preserved && coverage_missing.is_empty();
    Ok(EvalReport { interpreter, semantic, pass_syn, pass_sem, coverage_missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judge_contract_accepts_strict_json() {
        let v = parse_semantic_verdict(r#"{"intent_preserved": true, "missing_constraints": [], "rationale": "ok"}"#)
            .unwrap();
        assert!(v.intent_preserved);
    }

    #[test]
    fn judge_contract_rejects_violations() {
        for bad in [
            r#"{"intent_preserved": true, "missing_constraints": []}"#,
            r#"{"intent_preserved": true, "missing_constraints": [], "rationale": "", "extra": 1}"#,
            r#"{"intent_preserved": "yes", "missing_constraints": [], "rationale": ""}"#,
            r#"{"intent_preserved": true, "missing_constraints": ["x"], "rationale": ""}"#,
            r#"{"intent_preserved": false, "missing_constraints": "x", "rationale": ""}"#,
            "not json",
        ] {
            assert!(parse_semantic_verdict(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn stub_echoes_missing_constraints() {
        assert!(stub_verdict(&[]).intent_preserved);
        let v = stub_verdict(&["limit: 1".to_string()]);
        assert!(!v.intent_preserved);
        assert_eq!(v.missing_constraints, vec!["limit: 1"]);
    }
}
