//! Strict parsers for the stage output contracts.
//!
//! Every parser either returns a fully checked value or a [`ContractError`]
//! listing all problems found; nothing is partially accepted.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::proxy::ContextProxy;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{contract} contract violated: {}", reasons.join("; "))]
pub struct ContractError {
    pub contract: &'static str,
    pub reasons: Vec<String>,
}

impl ContractError {
    fn new(contract: &'static str, reasons: Vec<String>) -> Self {
        ContractError { contract, reasons }
    }
}

/// A tolerated deviation from a contract, recorded in traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization(pub String);

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

// ---------------------------------------------------------------- helpers

/// Strips one surrounding Markdown code fence, if present.
pub fn strip_code_fence(text: &str) -> Option<&str> {
    let t = text.trim();
    let rest = t.strip_prefix("```")?;
    let body_start = rest.find('\n').map(|i| i + 1)?;
    let body = &rest[body_start..];
    let end = body.rfind("```")?;
    if !body[end + 3..].trim().is_empty() {
        return None;
    }
    Some(body[..end].trim())
}

/// Parses a JSON object, tolerating a surrounding code fence.
pub fn parse_object(contract: &'static str, text: &str) -> Result<(Map<String, Value>, Vec<Normalization>), ContractError> {
    let mut notes = Vec::new();
    let body = match strip_code_fence(text) {
        Some(inner) => {
            notes.push(Normalization(format!("{contract}: stripped code fence")));
            inner
        }
        None => text.trim(),
    };
    match serde_json::from_str::<Value>(body) {
        Ok(Value::Object(map)) => Ok((map, notes)),
        Ok(other) => Err(ContractError::new(contract, vec![format!("expected a JSON object, got {}", kind(&other))])),
        Err(e) => Err(ContractError::new(contract, vec![format!("not valid JSON: {e}")])),
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Checks that `map` has exactly `keys`.
pub fn exact_keys(map: &Map<String, Value>, keys: &[&str], reasons: &mut Vec<String>) {
    for k in keys {
        if !map.contains_key(*k) {
            reasons.push(format!("missing key \"{k}\""));
        }
    }
    for k in map.keys() {
        if !keys.contains(&k.as_str()) {
            reasons.push(format!("unexpected key \"{k}\""));
        }
    }
}

fn string_list(map: &Map<String, Value>, key: &str, reasons: &mut Vec<String>) -> Vec<String> {
    match map.get(key) {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|v| match v {
                Value::String(s) => Some(s.clone()),
                other => {
                    reasons.push(format!("\"{key}\" items must be strings, found {}", kind(other)));
                    None
                }
            })
            .collect(),
        Some(other) => {
            reasons.push(format!("\"{key}\" must be a list, found {}", kind(other)));
            Vec::new()
        }
    }
}

fn value_list(map: &Map<String, Value>, key: &str, reasons: &mut Vec<String>) -> Vec<Value> {
    match map.get(key) {
        None => Vec::new(),
        Some(Value::Array(items)) => items.clone(),
        Some(other) => {
            reasons.push(format!("\"{key}\" must be a list, found {}", kind(other)));
            Vec::new()
        }
    }
}

fn enum_field<T: for<'de> Deserialize<'de>>(
    map: &Map<String, Value>,
    key: &str,
    allowed: &str,
    reasons: &mut Vec<String>,
) -> Option<T> {
    let v = map.get(key)?;
    match serde_json::from_value::<T>(v.clone()) {
        Ok(t) => Some(t),
        Err(_) => {
            reasons.push(format!("\"{key}\" must be one of {allowed}, found {v}"));
            None
        }
    }
}

fn finish<T>(contract: &'static str, value: Option<T>, reasons: Vec<String>) -> Result<T, ContractError> {
    match value {
        Some(v) if reasons.is_empty() => Ok(v),
        _ => Err(ContractError::new(contract, if reasons.is_empty() { vec!["malformed output".into()] } else { reasons })),
    }
}

// ---------------------------------------------------------------- stage 1

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSelection {
    pub tables: Vec<String>,
    pub attributes: Vec<String>,
}

impl SchemaSelection {
    pub fn has_table(&self, table: &str) -> bool {
        self.tables.iter().any(|t| t.eq_ignore_ascii_case(table))
    }

    pub fn has_attribute(&self, table: &str, column: &str) -> bool {
        self.attributes.iter().any(|a| {
            a.split_once('.').is_some_and(|(t, c)| t.eq_ignore_ascii_case(table) && c.eq_ignore_ascii_case(column))
        })
    }

    /// Whether any selected attribute has this column name.
    pub fn has_column_named(&self, column: &str) -> bool {
        self.attributes.iter().any(|a| a.split_once('.').is_some_and(|(_, c)| c.eq_ignore_ascii_case(column)))
    }
}

/// Parses the schema-selection contract and grounds it in the proxy.
///
/// Names are resolved case-insensitively to their stored spelling. An
/// attribute of a known but unlisted table adds the table, and missing
/// primary keys of selected tables are appended; both are recorded as
/// normalizations.
pub fn parse_schema_selection(
    text: &str,
    proxy: &ContextProxy,
) -> Result<(SchemaSelection, Vec<Normalization>), ContractError> {
    const C: &str = "stage1";
    let (map, mut notes) = parse_object(C, text)?;
    let mut reasons = Vec::new();
    exact_keys(&map, &["tables", "attributes"], &mut reasons);
    let raw_tables = string_list(&map, "tables", &mut reasons);
    let raw_attrs = string_list(&map, "attributes", &mut reasons);

    let mut tables: Vec<String> = Vec::new();
    for t in &raw_tables {
        match proxy.resolve_table(t.trim()) {
            Some(resolved) if !tables.iter().any(|x| x == resolved) => tables.push(resolved.to_string()),
            Some(_) => {}
            None => reasons.push(format!("unknown table \"{t}\"")),
        }
    }
    let mut attributes: Vec<String> = Vec::new();
    for a in &raw_attrs {
        let Some((t, c)) = a.trim().split_once('.') else {
            reasons.push(format!("attribute \"{a}\" is not qualified as table.attribute"));
            continue;
        };
        match proxy.column(t, c) {
            Some(d) => {
                let q = d.qualified();
                if !tables.iter().any(|x| x == &d.table) && !reasons.iter().any(|r| r.contains("unknown table")) {
                    notes.push(Normalization(format!("stage1: added table {} for attribute {q}", d.table)));
                    tables.push(d.table.clone());
                }
                if !attributes.contains(&q) {
                    attributes.push(q);
                }
            }
            None => reasons.push(format!("unknown attribute \"{a}\"")),
        }
    }
    if raw_tables.is_empty() && reasons.is_empty() {
        reasons.push("\"tables\" must not be empty".into());
    }
    if reasons.is_empty() {
        for t in tables.clone() {
            for pk in proxy.primary_keys(&t) {
                let q = pk.qualified();
                if !attributes.contains(&q) {
                    notes.push(Normalization(format!("stage1: appended primary key {q}")));
                    attributes.push(q);
                }
            }
        }
    }
    finish(C, Some((SchemaSelection { tables, attributes }, notes)), reasons)
}

// ---------------------------------------------------------------- stage 2

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonType {
    Literal,
    Equality,
    Range,
    Superlative,
    Comparative,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Min,
    Max,
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cardinality {
    Single,
    Multiple,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiteralSignal {
    pub column_candidate: Option<String>,
    pub raw_expression: String,
    pub comparison_type: ComparisonType,
    pub direction: Option<Direction>,
    pub cardinality_hint: Cardinality,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSet {
    pub literals: Vec<LiteralSignal>,
    pub filter_candidates: Vec<String>,
    pub notes: Option<String>,
}

static SQL_OPERATOR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(<=|>=|<>|!=|==|[<>=])|(?i:\b(count|sum|avg|min|max)\s*\()|\b(SELECT|WHERE|GROUP BY|ORDER BY|LIKE|BETWEEN)\b")
        .expect("static regex")
});

fn contains_sql(s: &str) -> bool {
    SQL_OPERATOR.is_match(s)
}

const LITERAL_KEYS: [&str; 6] =
    ["column_candidate", "raw_expression", "comparison_type", "direction", "cardinality_hint", "confidence"];

fn parse_literal(i: usize, v: &Value, reasons: &mut Vec<String>) -> Option<LiteralSignal> {
    let Value::Object(m) = v else {
        reasons.push(format!("literals[{i}] must be an object"));
        return None;
    };
    let mut local = Vec::new();
    exact_keys(m, &LITERAL_KEYS, &mut local);
    let column_candidate = match m.get("column_candidate") {
        Some(Value::Null) | None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => {
            local.push(format!("column_candidate must be a string or null, found {}", kind(other)));
            None
        }
    };
    let raw_expression = match m.get("raw_expression") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => {
            local.push("raw_expression is empty".into());
            String::new()
        }
        _ => {
            local.push("raw_expression must be a string".into());
            String::new()
        }
    };
    if contains_sql(&raw_expression) {
        local.push(format!("raw_expression \"{raw_expression}\" contains SQL"));
    }
    let comparison_type = enum_field::<ComparisonType>(
        m,
        "comparison_type",
        "literal|equality|range|superlative|comparative|unknown",
        &mut local,
    );
    let direction = match m.get("direction") {
        Some(Value::Null) | None => None,
        Some(Value::String(s)) if s == "none" => None,
        Some(_) => enum_field::<Direction>(m, "direction", "min|max|greater|less|null", &mut local),
    };
    let cardinality_hint = enum_field::<Cardinality>(m, "cardinality_hint", "single|multiple|unknown", &mut local);
    let confidence = match m.get("confidence").and_then(Value::as_f64) {
        Some(c) if (0.0..=1.0).contains(&c) => c,
        Some(c) => {
            local.push(format!("confidence {c} outside [0, 1]"));
            0.0
        }
        None => {
            local.push("confidence must be a number".into());
            0.0
        }
    };
    if let (Some(ct), Some(_)) = (comparison_type, direction) {
        if !matches!(ct, ComparisonType::Superlative | ComparisonType::Comparative | ComparisonType::Range) {
            local.push(format!("direction set for comparison_type {ct:?}"));
        }
    }
    let ok = local.is_empty();
    reasons.extend(local.into_iter().map(|r| format!("literals[{i}]: {r}")));
    if !ok {
        return None;
    }
    Some(LiteralSignal {
        column_candidate,
        raw_expression,
        comparison_type: comparison_type?,
        direction,
        cardinality_hint: cardinality_hint?,
        confidence,
    })
}

pub fn parse_signal_set(text: &str) -> Result<(SignalSet, Vec<Normalization>), ContractError> {
    const C: &str = "stage2";
    let (map, notes) = parse_object(C, text)?;
    let mut reasons = Vec::new();
    exact_keys(&map, &["literals", "filter_candidates", "notes"], &mut reasons);
    let literals: Vec<LiteralSignal> = value_list(&map, "literals", &mut reasons)
        .iter()
        .enumerate()
        .filter_map(|(i, v)| parse_literal(i, v, &mut reasons))
        .collect();
    let filter_candidates = string_list(&map, "filter_candidates", &mut reasons);
    for f in &filter_candidates {
        if contains_sql(f) {
            reasons.push(format!("filter candidate \"{f}\" contains SQL"));
        }
    }
    let signal_notes = match map.get("notes") {
        Some(Value::Null) | None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => {
            reasons.push(format!("\"notes\" must be a string or null, found {}", kind(other)));
            None
        }
    };
    finish(C, Some((SignalSet { literals, filter_candidates, notes: signal_notes }, notes)), reasons)
}

// ---------------------------------------------------------------- plan

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticPlan {
    pub intent: String,
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    pub filters: Vec<Value>,
    pub aggregations: Option<Map<String, Value>>,
    pub joins: Vec<Value>,
    pub order: Vec<Value>,
    pub limit: Option<u64>,
    pub grouping: Vec<Value>,
    pub derived: Vec<Value>,
    pub feasibility_checked: bool,
    pub cardinality: Cardinality,
    pub distinct: bool,
}

pub const PLAN_KEYS: [&str; 13] = [
    "intent",
    "entities",
    "attributes",
    "filters",
    "aggregations",
    "joins",
    "order",
    "limit",
    "grouping",
    "derived",
    "feasibility_checked",
    "cardinality",
    "distinct",
];

static EMBEDDED_SQL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bSELECT\b[\s\S]*\bFROM\b").expect("static regex"));

fn strings_in(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(items) => items.iter().for_each(|i| strings_in(i, out)),
        Value::Object(m) => m.iter().for_each(|(k, i)| {
            out.push(k.clone());
            strings_in(i, out)
        }),
        _ => {}
    }
}

/// Resolves a plan attribute (`table.column` or bare `column`) against the proxy.
pub fn resolve_attribute<'p>(proxy: &'p ContextProxy, attr: &str) -> Option<&'p crate::proxy::ColumnDescriptor> {
    let attr = attr.trim();
    match attr.split_once('.') {
        Some((t, c)) => proxy.column(t, c),
        None => proxy.descriptors.iter().find(|d| d.column.eq_ignore_ascii_case(attr)),
    }
}

pub fn parse_semantic_plan(text: &str, proxy: &ContextProxy) -> Result<(SemanticPlan, Vec<Normalization>), ContractError> {
    const C: &str = "plan";
    let (map, notes) = parse_object(C, text)?;
    let mut reasons = Vec::new();
    exact_keys(&map, &PLAN_KEYS, &mut reasons);

    let intent = match map.get("intent") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => {
            reasons.push(format!("\"intent\" must be a string, found {}", kind(other)));
            String::new()
        }
        None => String::new(),
    };
    let entities = string_list(&map, "entities", &mut reasons);
    let attributes = string_list(&map, "attributes", &mut reasons);
    let filters = value_list(&map, "filters", &mut reasons);
    let aggregations = match map.get("aggregations") {
        Some(Value::Null) | None => None,
        Some(Value::Object(m)) => Some(m.clone()),
        Some(other) => {
            reasons.push(format!("\"aggregations\" must be an object or null, found {}", kind(other)));
            None
        }
    };
    let joins = value_list(&map, "joins", &mut reasons);
    let order = value_list(&map, "order", &mut reasons);
    let limit = match map.get("limit") {
        Some(Value::Null) | None => None,
        Some(v) => match v.as_u64() {
            Some(n) if n > 0 => Some(n),
            _ => {
                reasons.push(format!("\"limit\" must be null or a positive integer, found {v}"));
                None
            }
        },
    };
    let grouping = value_list(&map, "grouping", &mut reasons);
    let derived = value_list(&map, "derived", &mut reasons);
    let feasibility_checked = match map.get("feasibility_checked") {
        Some(Value::Bool(true)) => true,
        Some(Value::Bool(false)) => {
            reasons.push("\"feasibility_checked\" must be true".into());
            false
        }
        Some(other) => {
            reasons.push(format!("\"feasibility_checked\" must be a boolean, found {}", kind(other)));
            false
        }
        None => false,
    };
    let cardinality = enum_field::<Cardinality>(&map, "cardinality", "single|multiple|unknown", &mut reasons);
    let distinct = match map.get("distinct") {
        Some(Value::Bool(b)) => *b,
        Some(other) => {
            reasons.push(format!("\"distinct\" must be a boolean, found {}", kind(other)));
            false
        }
        None => false,
    };

    for e in &entities {
        if proxy.resolve_table(e.trim()).is_none() {
            reasons.push(format!("entity \"{e}\" is not a schema table"));
        }
    }
    for a in &attributes {
        if resolve_attribute(proxy, a).is_none() {
            reasons.push(format!("attribute \"{a}\" is not a schema column"));
        }
    }
    let mut all_strings = Vec::new();
    for v in map.values() {
        strings_in(v, &mut all_strings);
    }
    if let Some(s) = all_strings.iter().find(|s| EMBEDDED_SQL.is_match(s)) {
        reasons.push(format!("plan contains SQL text: \"{s}\""));
    }

    let plan = cardinality.map(|cardinality| SemanticPlan {
        intent,
        entities,
        attributes,
        filters,
        aggregations,
        joins,
        order,
        limit,
        grouping,
        derived,
        feasibility_checked,
        cardinality,
        distinct,
    });
    finish(C, plan.map(|p| (p, notes)), reasons)
}

// ---------------------------------------------------------------- sql

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub text: String,
    pub terminated: bool,
    pub produced_at_iteration: u32,
}

impl SqlCandidate {
    /// Normalizes raw model text into a candidate.
    pub fn parse(raw: &str, iteration: u32) -> Result<(SqlCandidate, Vec<Normalization>), ContractError> {
        let (text, notes) = normalize_sql(raw)?;
        Ok((SqlCandidate { text, terminated: true, produced_at_iteration: iteration }, notes))
    }

    /// The statement without its trailing semicolon.
    pub fn body(&self) -> &str {
        self.text.trim_end().trim_end_matches(';').trim_end()
    }
}

/// Splits SQL text at top-level semicolons, respecting quotes and comments.
/// Empty statements are dropped.
pub fn split_statements(sql: &str) -> Vec<&str> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            q @ (b'\'' | b'"' | b'`') => {
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == q {
                        if bytes.get(i + 1) == Some(&q) {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
                i += 1;
            }
            b'[' => {
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
                i += 1;
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                    i += 1;
                }
                i += 2;
            }
            b';' => {
                out.push(&sql[start..i]);
                i += 1;
                start = i;
            }
            _ => i += 1,
        }
    }
    if start < sql.len() {
        out.push(&sql[start..]);
    }
    out.into_iter().filter(|s| !strip_comments(s).trim().is_empty()).collect()
}

fn strip_comments(s: &str) -> String {
    let mut out = String::new();
    for line in s.lines() {
        out.push_str(line.split("--").next().unwrap_or(""));
        out.push('\n');
    }
    out
}

/// Applies the SQL output contract. Returns the terminated statement.
pub fn normalize_sql(raw: &str) -> Result<(String, Vec<Normalization>), ContractError> {
    const C: &str = "sql";
    let mut notes = Vec::new();
    let body = match strip_code_fence(raw) {
        Some(inner) => {
            notes.push(Normalization("sql: stripped code fence".into()));
            inner
        }
        None => raw.trim(),
    };
    if body.is_empty() {
        return Err(ContractError::new(C, vec!["empty output".into()]));
    }
    if body.contains("```") {
        return Err(ContractError::new(C, vec!["output contains Markdown fences".into()]));
    }
    let statements = split_statements(body);
    match statements.len() {
        0 => return Err(ContractError::new(C, vec!["empty output".into()])),
        1 => {}
        n => return Err(ContractError::new(C, vec![format!("{n} statements; exactly one is allowed")])),
    }
    let statement = statements[0].trim();
    let first = statement.split(|c: char| c.is_whitespace() || c == '(').next().unwrap_or("").to_ascii_uppercase();
    if !matches!(first.as_str(), "SELECT" | "WITH" | "VALUES") {
        return Err(ContractError::new(C, vec![format!("output does not start with a query (found \"{first}\")")]));
    }
    if !body.trim_end().ends_with(';') {
        notes.push(Normalization("sql: appended missing semicolon".into()));
    }
    Ok((format!("{statement};"), notes))
}

// ---------------------------------------------------------------- shared

/// Tables mentioned by a selection, case-normalized.
pub fn table_set(sel: &SchemaSelection) -> BTreeSet<String> {
    sel.tables.iter().map(|t| t.to_ascii_lowercase()).collect()
}
