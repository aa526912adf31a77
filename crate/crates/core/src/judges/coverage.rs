//! Plan-derived intent checked against the SQL signature.
//!
//! Every plan constraint (filter, aggregation, grouping, order, limit,
//! distinct) must have a matching signature element. Operators are compared
//! by class, so "at least" and `>=` agree while `>` and `>=` do not.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::{Map, Value};

use super::signature::{normalize_term, OpClass, Signature};
use crate::pipeline::SemanticPlan;

/// Reported when the candidate cannot be analyzed at all.
pub const UNANALYZABLE: &str = "signature: query could not be analyzed";

/// Operator phrases, longest first so that `>=` wins over `>`.
const OP_PHRASES: &[(&str, OpClass)] = &[
    ("greater than or equal to", OpClass::AtLeast),
    ("less than or equal to", OpClass::AtMost),
    ("not between", OpClass::NotRange),
    ("is not null", OpClass::IsNotNull),
    ("not equal to", OpClass::NotEqual),
    ("greater than", OpClass::Greater),
    ("more than", OpClass::Greater),
    ("fewer than", OpClass::Less),
    ("less than", OpClass::Less),
    ("not equal", OpClass::NotEqual),
    ("equal to", OpClass::Equality),
    ("not like", OpClass::NotLike),
    ("at least", OpClass::AtLeast),
    ("at most", OpClass::AtMost),
    ("is null", OpClass::IsNull),
    ("equality", OpClass::Equality),
    ("greater", OpClass::Greater),
    ("between", OpClass::Range),
    ("not in", OpClass::NotIn),
    ("equals", OpClass::Equality),
    ("before", OpClass::Less),
    ("after", OpClass::Greater),
    ("range", OpClass::Range),
    ("less", OpClass::Less),
    ("like", OpClass::Like),
    ("in", OpClass::In),
    (">=", OpClass::AtLeast),
    ("<=", OpClass::AtMost),
    ("!=", OpClass::NotEqual),
    ("<>", OpClass::NotEqual),
    ("==", OpClass::Equality),
    (">", OpClass::Greater),
    ("<", OpClass::Less),
    ("=", OpClass::Equality),
];

static FILTER: LazyLock<Regex> = LazyLock::new(|| {
    let ops: Vec<String> = OP_PHRASES
        .iter()
        .map(|(p, _)| {
            let escaped = regex::escape(p).replace(' ', r"\s+");
            if p.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                format!(r"\b{escaped}\b")
            } else {
                escaped
            }
        })
        .collect();
    let pattern = format!(
        r#"(?is)^\s*(?P<col>[A-Za-z_][\w.]*|"[^"]+"|`[^`]+`|\[[^\]]+\])?\s*(?P<op>{})\s*(?P<lit>.*?)\s*;?\s*$"#,
        ops.join("|")
    );
    Regex::new(&pattern).expect("operator table regex")
});

static AGG_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(count|sum|avg|average|min|minimum|max|maximum)\b").expect("static regex"));

static PLAIN_IDENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\*|[A-Za-z_][\w]*(\.[A-Za-z_][\w]*)?)$").expect("static regex"));

fn op_from_phrase(phrase: &str) -> Option<OpClass> {
    let collapsed = phrase.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    OP_PHRASES.iter().find(|(p, _)| *p == collapsed).map(|(_, c)| *c)
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('\'', '\''), ('"', '"'), ('`', '`'), ('[', ']')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

fn canonical_scalar(s: &str) -> String {
    let s = unquote(s);
    match s.parse::<f64>() {
        Ok(n) if n.is_finite() && n.fract() == 0.0 && n.abs() < 1e15 => format!("{}", n as i64),
        Ok(n) if n.is_finite() => format!("{n}"),
        _ => s.to_lowercase(),
    }
}

/// Literal in comparable form: unquoted, case-folded, numbers normalized,
/// ranges as `lo..hi`, lists sorted.
pub fn canonical_literal(op: OpClass, literal: &str) -> String {
    match op {
        OpClass::Range | OpClass::NotRange => {
            let (lo, hi) = literal
                .split_once("..")
                .or_else(|| split_word(literal, "and"))
                .unwrap_or((literal, ""));
            format!("{}..{}", canonical_scalar(lo), canonical_scalar(hi))
        }
        OpClass::In | OpClass::NotIn => {
            let inner = literal.trim().trim_start_matches('(').trim_end_matches(')');
            let mut items: Vec<String> = inner.split(',').map(canonical_scalar).collect();
            items.sort();
            items.join(",")
        }
        OpClass::IsNull | OpClass::IsNotNull => "null".to_string(),
        _ => canonical_scalar(literal),
    }
}

fn split_word<'a>(text: &'a str, word: &str) -> Option<(&'a str, &'a str)> {
    let lower = text.to_ascii_lowercase();
    let needle = format!(" {word} ");
    lower.find(&needle).map(|i| (&text[..i], &text[i + needle.len()..]))
}

/// A filter required by the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanFilter {
    pub column: Option<String>,
    pub op: OpClass,
    pub literal: String,
    pub label: String,
}

fn column_term(raw: &str) -> String {
    normalize_term(unquote(raw))
}

/// Parses a filter phrase such as `hire_year > 2019`, `greater 2019` or
/// `FundingType != 'Locally funded'`.
pub fn parse_filter_text(text: &str) -> Option<PlanFilter> {
    let caps = FILTER.captures(text)?;
    let op = op_from_phrase(caps.name("op")?.as_str())?;
    let literal = caps.name("lit").map_or("", |m| m.as_str());
    if literal.is_empty() && !matches!(op, OpClass::IsNull | OpClass::IsNotNull) {
        return None;
    }
    Some(PlanFilter {
        column: caps.name("col").map(|m| column_term(m.as_str())),
        op,
        literal: canonical_literal(op, literal),
        label: text.trim().to_string(),
    })
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Null => Some("NULL".into()),
        Value::Array(items) => Some(items.iter().filter_map(scalar_text).collect::<Vec<_>>().join(",")),
        Value::Object(_) => None,
    }
}

fn first_key<'a>(map: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| map.get(*k))
}

fn parse_filter_object(map: &Map<String, Value>) -> Option<PlanFilter> {
    let column = first_key(map, &["column", "attribute", "field"]).and_then(Value::as_str).map(column_term);
    let op_text = first_key(map, &["op", "operator", "comparison"]).and_then(Value::as_str)?;
    let op = op_from_phrase(op_text)?;
    let literal = match first_key(map, &["value", "literal", "values"]) {
        Some(Value::Array(items)) if matches!(op, OpClass::Range | OpClass::NotRange) && items.len() == 2 => {
            format!("{}..{}", scalar_text(&items[0])?, scalar_text(&items[1])?)
        }
        Some(v) => scalar_text(v)?,
        None => String::new(),
    };
    let label = format!("{} {} {}", column.as_deref().unwrap_or("?"), op, literal).trim().to_string();
    Some(PlanFilter { column, op, literal: canonical_literal(op, &literal), label })
}

/// Plan filters in comparable form. Filters that name no recognizable
/// operator are skipped; they cannot be checked against a signature.
pub fn plan_filters(plan: &SemanticPlan) -> Vec<PlanFilter> {
    plan.filters
        .iter()
        .filter_map(|f| match f {
            Value::String(s) => parse_filter_text(s),
            Value::Object(m) => parse_filter_object(m),
            _ => None,
        })
        .collect()
}

fn canonical_function(token: &str) -> &'static str {
    match token.to_ascii_uppercase().as_str() {
        "COUNT" => "COUNT",
        "SUM" => "SUM",
        "AVG" | "AVERAGE" => "AVG",
        "MIN" | "MINIMUM" => "MIN",
        _ => "MAX",
    }
}

/// `(function, optional target)` pairs required by the plan.
pub fn plan_aggregations(plan: &SemanticPlan) -> Vec<(String, Option<String>)> {
    let mut out: Vec<(String, Option<String>)> = Vec::new();
    let mut push = |f: &str, target: Option<String>| {
        let f = canonical_function(f).to_string();
        if target.is_some() {
            out.retain(|(g, t)| !(g == &f && t.is_none()));
        } else if out.iter().any(|(g, _)| g == &f) {
            return;
        }
        if !out.contains(&(f.clone(), target.clone())) {
            out.push((f, target));
        }
    };
    let Some(map) = &plan.aggregations else { return Vec::new() };
    let plain_target = |v: &Value| v.as_str().map(str::trim).filter(|s| PLAIN_IDENT.is_match(s)).map(column_term);
    if let Some(Value::String(f)) = map.get("function") {
        if AGG_TOKEN.is_match(f) && AGG_TOKEN.find(f).is_some_and(|m| m.as_str().len() == f.trim().len()) {
            push(f.trim(), map.get("target").and_then(plain_target));
            return out;
        }
    }
    for (key, value) in map {
        if AGG_TOKEN.find(key).is_some_and(|m| m.len() == key.len()) {
            push(key, plain_target(value));
            continue;
        }
        for m in AGG_TOKEN.find_iter(key) {
            push(m.as_str(), None);
        }
        let mut texts = Vec::new();
        collect_strings(value, &mut texts);
        for t in texts {
            for m in AGG_TOKEN.find_iter(&t) {
                push(m.as_str(), None);
            }
        }
    }
    out
}

fn collect_strings(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) => out.push(s.clone()),
        Value::Array(items) => items.iter().for_each(|i| collect_strings(i, out)),
        Value::Object(m) => m.iter().for_each(|(k, i)| {
            out.push(k.clone());
            collect_strings(i, out)
        }),
        _ => {}
    }
}

fn order_term(v: &Value) -> Option<(String, bool)> {
    match v {
        Value::String(s) => {
            let mut words: Vec<&str> = s.split_whitespace().collect();
            let ascending = match words.last().map(|w| w.to_ascii_lowercase()) {
                Some(w) if w == "desc" || w == "descending" => {
                    words.pop();
                    false
                }
                Some(w) if w == "asc" || w == "ascending" => {
                    words.pop();
                    true
                }
                _ => true,
            };
            (!words.is_empty()).then(|| (normalize_term(&words.join(" ")), ascending))
        }
        Value::Object(m) => {
            let term = first_key(m, &["column", "attribute", "term", "expression", "by"]).and_then(Value::as_str)?;
            let dir = first_key(m, &["direction", "dir", "order"]).and_then(Value::as_str).unwrap_or("asc");
            Some((normalize_term(term), !dir.to_ascii_lowercase().starts_with("desc")))
        }
        _ => None,
    }
}

fn grouping_term(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(normalize_term(s)),
        Value::Object(m) => first_key(m, &["column", "attribute", "term"]).and_then(Value::as_str).map(normalize_term),
        _ => None,
    }
}

fn filter_matches(f: &PlanFilter, sig: &Signature) -> bool {
    sig.predicates.iter().any(|p| {
        p.op == f.op
            && f.column.as_ref().is_none_or(|c| *c == p.column)
            && canonical_literal(p.op, &p.literal) == f.literal
    })
}

fn aggregation_matches(function: &str, target: Option<&str>, sig: &Signature) -> bool {
    sig.aggregations.iter().any(|a| {
        a.function == function
            && match target {
                None => true,
                Some(t) => a.target == t || (a.target == "*" && (t == "*" || sig.tables.contains(t))),
            }
    })
}

/// Every plan constraint with no matching signature element, labelled for
/// critics and traces.
pub fn coverage_check(plan: &SemanticPlan, sig: &Signature) -> Vec<String> {
    let mut missing = Vec::new();
    for f in plan_filters(plan) {
        if !filter_matches(&f, sig) {
            missing.push(format!("filter: {}", f.label));
        }
    }
    for (function, target) in plan_aggregations(plan) {
        if !aggregation_matches(&function, target.as_deref(), sig) {
            missing.push(match target {
                Some(t) => format!("aggregation: {function}({t})"),
                None => format!("aggregation: {function}"),
            });
        }
    }
    for g in plan.grouping.iter().filter_map(grouping_term) {
        if !sig.grouping.contains(&g) {
            missing.push(format!("grouping: {g}"));
        }
    }
    for (term, ascending) in plan.order.iter().filter_map(order_term) {
        if !sig.ordering.iter().any(|o| o.term == term && o.ascending == ascending) {
            missing.push(format!("order: {term} {}", if ascending { "asc" } else { "desc" }));
        }
    }
    if let Some(n) = plan.limit {
        if sig.limit != Some(n) {
            missing.push(format!("limit: {n}"));
        }
    }
    if plan.distinct && !sig.distinct && !sig.has_distinct_aggregate() {
        missing.push("distinct".to_string());
    }
    missing
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judges::signature::extract_signature;
    use crate::pipeline::Cardinality;
    use serde_json::json;

    fn plan() -> SemanticPlan {
        SemanticPlan {
            intent: "i".into(),
            entities: vec![],
            attributes: vec![],
            filters: vec![],
            aggregations: None,
            joins: vec![],
            order: vec![],
            limit: None,
            grouping: vec![],
            derived: vec![],
            feasibility_checked: true,
            cardinality: Cardinality::Unknown,
            distinct: false,
        }
    }

    fn check(p: &SemanticPlan, sql: &str) -> Vec<String> {
        coverage_check(p, &extract_signature(sql).unwrap())
    }

    #[test]
    fn exact_order_matches() {
        let p = SemanticPlan { order: vec![json!("age ASC")], ..plan() };
        assert!(check(&p, "SELECT name FROM head ORDER BY age ASC").is_empty());
        assert_eq!(check(&p, "SELECT name FROM head ORDER BY age DESC"), vec!["order: age asc"]);
    }

    #[test]
    fn missing_aggregate_is_reported() {
        let mut m = Map::new();
        m.insert("COUNT".into(), json!("*"));
        let p = SemanticPlan { aggregations: Some(m), ..plan() };
        assert_eq!(check(&p, "SELECT name FROM head"), vec!["aggregation: COUNT(*)"]);
        assert!(check(&p, "SELECT COUNT(*) FROM head").is_empty());
    }

    #[test]
    fn aggregate_tokens_in_values_are_found() {
        let mut m = Map::new();
        m.insert("ratio".into(), json!("SUM of locally funded over SUM of the rest"));
        let p = SemanticPlan { aggregations: Some(m), ..plan() };
        assert_eq!(check(&p, "SELECT COUNT(*) FROM t"), vec!["aggregation: SUM"]);
        assert!(check(&p, "SELECT SUM(a) FROM t").is_empty());
    }

    /// Expected outcomes computed from the operator-class table by hand,
    /// independent of the phrase parser: a filter is covered only when the
    /// SQL operator lands in the same class.
    #[test]
    fn operator_classes_are_not_interchangeable() {
        let sql_ops = [(">", "greater"), (">=", "at least"), ("<", "less"), ("<=", "at most"), ("=", "equality")];
        let plan_phrases = [
            ("greater 2019", "greater"),
            ("hire_year > 2019", "greater"),
            ("after 2019", "greater"),
            ("at least 2019", "at least"),
            ("hire_year >= 2019", "at least"),
            ("less than 2019", "less"),
            ("before 2019", "less"),
            ("at most 2019", "at most"),
            ("hire_year = 2019", "equality"),
            ("equals 2019", "equality"),
        ];
        for (sym, class) in sql_ops {
            let sql = format!("SELECT COUNT(*) FROM employee WHERE hire_year {sym} 2019");
            for (phrase, want) in plan_phrases {
                let p = SemanticPlan { filters: vec![json!(phrase)], ..plan() };
                let missing = check(&p, &sql);
                assert_eq!(missing.is_empty(), class == want, "plan {phrase:?} vs sql {sym}");
            }
        }
    }

    #[test]
    fn greater_vs_at_least_is_a_mismatch() {
        let p = SemanticPlan { filters: vec![json!("greater 2019")], ..plan() };
        assert_eq!(check(&p, "SELECT * FROM employee WHERE hire_year >= 2019"), vec!["filter: greater 2019"]);
    }

    #[test]
    fn object_filters_and_quoting() {
        let p = SemanticPlan {
            filters: vec![
                json!({"column": "schools.FundingType", "op": "!=", "value": "Locally funded"}),
                json!("County = 'Santa Clara'"),
                json!({"column": "Charter", "operator": "equality", "value": 1}),
            ],
            ..plan()
        };
        let t0 = "SELECT CAST(SUM(CASE WHEN FundingType = 'Locally funded' THEN 1 ELSE 0 END) AS REAL) * 100 / COUNT(*) \
                  FROM schools WHERE County = 'Santa Clara' AND Charter = 1";
        assert_eq!(check(&p, t0), vec!["filter: fundingtype not equal Locally funded"]);
        let t1 = t0.replace("COUNT(*)", "SUM(CASE WHEN FundingType != 'Locally funded' THEN 1 ELSE 0 END)");
        assert!(check(&p, &t1).is_empty());
    }

    #[test]
    fn ranges_lists_and_nulls() {
        let p = SemanticPlan {
            filters: vec![json!("age between 30 and 40"), json!("state in ('b', 'a')"), json!("name is null")],
            ..plan()
        };
        assert!(check(&p, "SELECT 1 FROM t WHERE age BETWEEN 30 AND 40 AND state IN ('a','b') AND name IS NULL")
            .is_empty());
        assert_eq!(check(&p, "SELECT 1 FROM t WHERE age BETWEEN 30 AND 41 AND state IN ('a','b') AND name IS NULL").len(), 1);
    }

    #[test]
    fn grouping_limit_distinct() {
        let p = SemanticPlan { grouping: vec![json!("T1.born_state")], limit: Some(1), distinct: true, ..plan() };
        assert_eq!(check(&p, "SELECT born_state FROM head"), vec!["grouping: born_state", "limit: 1", "distinct"]);
        assert!(check(&p, "SELECT DISTINCT born_state FROM head GROUP BY born_state LIMIT 1").is_empty());
        assert!(check(&p, "SELECT COUNT(DISTINCT born_state) FROM head GROUP BY born_state LIMIT 1").is_empty());
    }

    #[test]
    fn unparseable_filters_are_skipped() {
        let p = SemanticPlan { filters: vec![json!("the recent ones"), json!(42)], ..plan() };
        assert!(check(&p, "SELECT 1").is_empty());
    }

    #[test]
    fn filter_phrase_parsing() {
        let f = parse_filter_text("greater 2019").unwrap();
        assert_eq!((f.column, f.op, f.literal.as_str()), (None, OpClass::Greater, "2019"));
        let f = parse_filter_text("hire_year greater than or equal to 2019.0").unwrap();
        assert_eq!((f.column.as_deref(), f.op, f.literal.as_str()), (Some("hire_year"), OpClass::AtLeast, "2019"));
        let f = parse_filter_text("intent <> 'X'").unwrap();
        assert_eq!((f.column.as_deref(), f.op, f.literal.as_str()), (Some("intent"), OpClass::NotEqual, "x"));
        assert!(parse_filter_text("nothing here").is_none());
    }
}
