//! Normalized constraint sets extracted from SQL.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::ControlFlow;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    BinaryOperator, DuplicateTreatment, Expr, FunctionArg, FunctionArgExpr, FunctionArguments, GroupByExpr, ObjectName, Query, Select,
    SelectItem, SetExpr, Statement, UnaryOperator, Value, Visit, Visitor,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use thiserror::Error;

/// Comparison operators up to surface form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpClass {
    Greater,
    AtLeast,
    Less,
    AtMost,
    Equality,
    NotEqual,
    Range,
    NotRange,
    Like,
    NotLike,
    In,
    NotIn,
    IsNull,
    IsNotNull,
}

impl OpClass {
    /// The class seen from the other operand: `5 < x` is `x > 5`.
    pub fn flipped(self) -> OpClass {
        match self {
            OpClass::Greater => OpClass::Less,
            OpClass::Less => OpClass::Greater,
            OpClass::AtLeast => OpClass::AtMost,
            OpClass::AtMost => OpClass::AtLeast,
            other => other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpClass::Greater => "greater",
            OpClass::AtLeast => "at least",
            OpClass::Less => "less",
            OpClass::AtMost => "at most",
            OpClass::Equality => "equality",
            OpClass::NotEqual => "not equal",
            OpClass::Range => "range",
            OpClass::NotRange => "not range",
            OpClass::Like => "like",
            OpClass::NotLike => "not like",
            OpClass::In => "in",
            OpClass::NotIn => "not in",
            OpClass::IsNull => "is null",
            OpClass::IsNotNull => "is not null",
        }
    }

    fn from_binary(op: &BinaryOperator) -> Option<OpClass> {
        Some(match op {
            BinaryOperator::Gt => OpClass::Greater,
            BinaryOperator::GtEq => OpClass::AtLeast,
            BinaryOperator::Lt => OpClass::Less,
            BinaryOperator::LtEq => OpClass::AtMost,
            BinaryOperator::Eq => OpClass::Equality,
            BinaryOperator::NotEq => OpClass::NotEqual,
            _ => return None,
        })
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `(column, operator class, literal)` with the column unqualified and
/// lowercased and the literal unquoted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Predicate {
    pub column: String,
    pub op: OpClass,
    pub literal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Aggregate {
    /// Upper-case function name.
    pub function: String,
    /// `*` or the rendered argument term.
    pub target: String,
    pub distinct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OrderTerm {
    pub term: String,
    pub ascending: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub tables: BTreeSet<String>,
    pub projections: Vec<String>,
    pub predicates: BTreeSet<Predicate>,
    pub aggregations: BTreeSet<Aggregate>,
    pub grouping: BTreeSet<String>,
    pub ordering: Vec<OrderTerm>,
    pub limit: Option<u64>,
    pub distinct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignatureError {
    #[error("unparseable SQL: {0}")]
    Unparseable(String),
    #[error("expected exactly one query statement")]
    NotAQuery,
}

pub const AGGREGATES: [&str; 5] = ["COUNT", "SUM", "AVG", "MIN", "MAX"];

static QUALIFIER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b[a-z_][a-z0-9_]*\.").expect("static regex"));

/// Surface-independent rendering of an expression: lowercase, no
/// whitespace, no identifier quotes, no table qualifiers.
pub fn normalize_term(text: &str) -> String {
    let lowered: String = text
        .chars()
        .filter(|c| !c.is_whitespace() && !matches!(c, '"' | '`' | '[' | ']'))
        .flat_map(char::to_lowercase)
        .collect();
    QUALIFIER.replace_all(&lowered, "").into_owned()
}

pub fn render_term(expr: &Expr) -> String {
    match expr {
        Expr::Identifier(id) => id.value.to_lowercase(),
        Expr::CompoundIdentifier(parts) => parts.last().map(|p| p.value.to_lowercase()).unwrap_or_default(),
        Expr::Nested(inner) => render_term(inner),
        other => normalize_term(&other.to_string()),
    }
}

fn column_of(expr: &Expr) -> Option<String> {
    match expr {
        Expr::Identifier(_) | Expr::CompoundIdentifier(_) => Some(render_term(expr)),
        Expr::Nested(inner) => column_of(inner),
        _ => None,
    }
}

fn literal_of(expr: &Expr) -> Option<String> {
    match expr {
        Expr::Value(v) => Some(match v {
            Value::Number(n, _) => n.clone(),
            Value::SingleQuotedString(s) | Value::DoubleQuotedString(s) => s.clone(),
            Value::Boolean(b) => b.to_string(),
            Value::Null => "NULL".to_string(),
            other => other.to_string(),
        }),
        Expr::UnaryOp { op: UnaryOperator::Minus, expr } => literal_of(expr).map(|l| format!("-{l}")),
        Expr::UnaryOp { op: UnaryOperator::Plus, expr } => literal_of(expr),
        Expr::Nested(inner) => literal_of(inner),
        _ => None,
    }
}

fn predicate(column: &Expr, op: OpClass, literal: String) -> Option<Predicate> {
    column_of(column).map(|column| Predicate { column, op, literal })
}

#[derive(Default)]
struct Collector {
    sig: Signature,
    seen_outer: bool,
    cte_names: BTreeSet<String>,
}

impl Collector {
    fn select(&mut self, select: &Select, outermost: bool) {
        if let GroupByExpr::Expressions(exprs, _) = &select.group_by {
            self.sig.grouping.extend(exprs.iter().map(render_term));
        }
        if outermost {
            self.sig.distinct |= select.distinct.is_some();
            for item in &select.projection {
                let rendered = match item {
                    SelectItem::UnnamedExpr(e) | SelectItem::ExprWithAlias { expr: e, .. } => render_term(e),
                    SelectItem::Wildcard(_) | SelectItem::QualifiedWildcard(..) => "*".to_string(),
                };
                self.sig.projections.push(rendered);
            }
        }
    }

    fn body(&mut self, body: &SetExpr, outermost: bool) {
        match body {
            SetExpr::Select(s) => self.select(s, outermost),
            SetExpr::SetOperation { left, right, .. } => {
                self.body(left, outermost);
                self.body(right, false);
            }
            // Nested queries are visited on their own.
            _ => {}
        }
    }
}

impl Visitor for Collector {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        let outermost = !self.seen_outer;
        self.seen_outer = true;
        if let Some(with) = &query.with {
            self.cte_names.extend(with.cte_tables.iter().map(|c| c.alias.name.value.to_lowercase()));
        }
        self.body(&query.body, outermost);
        if outermost {
            if let Some(order_by) = &query.order_by {
                self.sig.ordering.extend(
                    order_by.exprs.iter().map(|o| OrderTerm { term: render_term(&o.expr), ascending: o.asc != Some(false) }),
                );
            }
            self.sig.limit = query.limit.as_ref().and_then(literal_of).and_then(|l| l.parse().ok());
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_relation(&mut self, relation: &ObjectName) -> ControlFlow<()> {
        if let Some(last) = relation.0.last() {
            self.sig.tables.insert(last.value.to_lowercase());
        }
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        let found = match expr {
            Expr::BinaryOp { left, op, right } => OpClass::from_binary(op).and_then(|class| {
                match (literal_of(right), literal_of(left)) {
                    (Some(lit), _) => predicate(left, class, lit),
                    (None, Some(lit)) => predicate(right, class.flipped(), lit),
                    _ => None,
                }
            }),
            Expr::Between { expr, negated, low, high } => match (literal_of(low), literal_of(high)) {
                (Some(lo), Some(hi)) => {
                    predicate(expr, if *negated { OpClass::NotRange } else { OpClass::Range }, format!("{lo}..{hi}"))
                }
                _ => None,
            },
            Expr::Like { negated, expr, pattern, .. } | Expr::ILike { negated, expr, pattern, .. } => {
                literal_of(pattern)
                    .and_then(|lit| predicate(expr, if *negated { OpClass::NotLike } else { OpClass::Like }, lit))
            }
            Expr::InList { expr, list, negated } => {
                let lits: Option<Vec<String>> = list.iter().map(literal_of).collect();
                lits.and_then(|mut l| {
                    l.sort();
                    predicate(expr, if *negated { OpClass::NotIn } else { OpClass::In }, l.join(","))
                })
            }
            Expr::IsNull(e) => predicate(e, OpClass::IsNull, "NULL".into()),
            Expr::IsNotNull(e) => predicate(e, OpClass::IsNotNull, "NULL".into()),
            Expr::Function(f) => {
                let name = f.name.0.last().map(|i| i.value.to_uppercase()).unwrap_or_default();
                if AGGREGATES.contains(&name.as_str()) {
                    if let FunctionArguments::List(list) = &f.args {
                        let distinct = matches!(list.duplicate_treatment, Some(DuplicateTreatment::Distinct));
                        let target = match list.args.first() {
                            Some(FunctionArg::Unnamed(FunctionArgExpr::Expr(e))) => render_term(e),
                            Some(FunctionArg::Unnamed(FunctionArgExpr::Wildcard)) | None => "*".to_string(),
                            Some(other) => normalize_term(&other.to_string()),
                        };
                        self.sig.aggregations.insert(Aggregate { function: name, target, distinct });
                    }
                }
                None
            }
            _ => None,
        };
        if let Some(p) = found {
            self.sig.predicates.insert(p);
        }
        ControlFlow::Continue(())
    }
}

/// Parses one SQL query.
pub fn parse_query(sql: &str) -> Result<Statement, SignatureError> {
    let mut statements =
        Parser::parse_sql(&SQLiteDialect {}, sql).map_err(|e| SignatureError::Unparseable(e.to_string()))?;
    if statements.len() != 1 {
        return Err(SignatureError::NotAQuery);
    }
    let statement = statements.remove(0);
    if !matches!(statement, Statement::Query(_)) {
        return Err(SignatureError::NotAQuery);
    }
    Ok(statement)
}

pub fn extract_signature(sql: &str) -> Result<Signature, SignatureError> {
    let statement = parse_query(sql)?;
    let mut collector = Collector::default();
    let _ = statement.visit(&mut collector);
    let Collector { mut sig, cte_names, .. } = collector;
    sig.tables.retain(|t| !cte_names.contains(t));
    Ok(sig)
}

impl Signature {
    /// Whether some aggregate in the query is applied to distinct values.
    pub fn has_distinct_aggregate(&self) -> bool {
        self.aggregations.iter().any(|a| a.distinct)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(column: &str, op: OpClass, literal: &str) -> Predicate {
        Predicate { column: column.into(), op, literal: literal.into() }
    }

    #[test]
    fn count_with_comparative() {
        let s = extract_signature("SELECT COUNT(*) FROM employee WHERE hire_year > 2019;").unwrap();
        assert_eq!(s.tables, BTreeSet::from(["employee".to_string()]));
        assert_eq!(
            s.aggregations,
            BTreeSet::from([Aggregate { function: "COUNT".into(), target: "*".into(), distinct: false }])
        );
        assert_eq!(s.predicates, BTreeSet::from([pred("hire_year", OpClass::Greater, "2019")]));
    }

    #[test]
    fn constant_select_is_empty() {
        let s = extract_signature("SELECT 1;").unwrap();
        assert!(s.tables.is_empty() && s.predicates.is_empty() && s.aggregations.is_empty());
    }

    #[test]
    fn ordering_limit_and_distinct() {
        let s = extract_signature("SELECT DISTINCT name FROM head ORDER BY age ASC, name DESC LIMIT 3").unwrap();
        assert_eq!(
            s.ordering,
            vec![OrderTerm { term: "age".into(), ascending: true }, OrderTerm { term: "name".into(), ascending: false }]
        );
        assert_eq!(s.limit, Some(3));
        assert!(s.distinct);
        let s = extract_signature("SELECT name FROM head ORDER BY age").unwrap();
        assert!(s.ordering[0].ascending);
    }

    #[test]
    fn literal_on_left_is_flipped() {
        let s = extract_signature("SELECT * FROM t WHERE 5 < x AND 3 >= y").unwrap();
        assert!(s.predicates.contains(&pred("x", OpClass::Greater, "5")));
        assert!(s.predicates.contains(&pred("y", OpClass::AtMost, "3")));
    }

    #[test]
    fn aliases_and_qualifiers_are_ignored() {
        let a = extract_signature("SELECT T1.name FROM head AS T1 WHERE T1.age >= 56 GROUP BY T1.born_state").unwrap();
        let b = extract_signature("SELECT name FROM head WHERE age >= 56 GROUP BY born_state").unwrap();
        assert_eq!(a.predicates, b.predicates);
        assert_eq!(a.grouping, b.grouping);
        assert_eq!(a.projections, b.projections);
    }

    #[test]
    fn predicates_inside_case_are_found() {
        let sql = "SELECT CAST(SUM(CASE WHEN FundingType = 'Locally funded' THEN 1 ELSE 0 END) AS REAL) * 100 / \
                   SUM(CASE WHEN FundingType != 'Locally funded' THEN 1 ELSE 0 END) FROM schools \
                   WHERE County = 'Santa Clara' AND Charter = 1";
        let s = extract_signature(sql).unwrap();
        for p in [
            pred("fundingtype", OpClass::Equality, "Locally funded"),
            pred("fundingtype", OpClass::NotEqual, "Locally funded"),
            pred("county", OpClass::Equality, "Santa Clara"),
            pred("charter", OpClass::Equality, "1"),
        ] {
            assert!(s.predicates.contains(&p), "missing {p:?}");
        }
        assert!(s.aggregations.iter().all(|a| a.function == "SUM"));
    }

    #[test]
    fn between_like_in_and_null() {
        let s = extract_signature(
            "SELECT a FROM t WHERE b BETWEEN 1 AND 5 AND c LIKE '%x%' AND d IN ('q', 'p') AND e IS NULL AND f NOT IN (2)",
        )
        .unwrap();
        assert!(s.predicates.contains(&pred("b", OpClass::Range, "1..5")));
        assert!(s.predicates.contains(&pred("c", OpClass::Like, "%x%")));
        assert!(s.predicates.contains(&pred("d", OpClass::In, "p,q")));
        assert!(s.predicates.contains(&pred("e", OpClass::IsNull, "NULL")));
        assert!(s.predicates.contains(&pred("f", OpClass::NotIn, "2")));
    }

    #[test]
    fn cte_names_are_not_tables_and_subqueries_count() {
        let s = extract_signature(
            "WITH x AS (SELECT id FROM a WHERE v > 1) SELECT COUNT(DISTINCT id) FROM x WHERE id IN (SELECT id FROM b)",
        )
        .unwrap();
        assert_eq!(s.tables, BTreeSet::from(["a".to_string(), "b".to_string()]));
        assert!(s.predicates.contains(&pred("v", OpClass::Greater, "1")));
        assert!(s.has_distinct_aggregate());
    }

    #[test]
    fn unparseable_and_non_query() {
        assert!(matches!(extract_signature("SELEC name FROM head"), Err(SignatureError::Unparseable(_))));
        assert_eq!(extract_signature("DELETE FROM head"), Err(SignatureError::NotAQuery));
        assert_eq!(extract_signature("SELECT 1; SELECT 2"), Err(SignatureError::NotAQuery));
    }

    #[test]
    fn normalize_term_strips_surface() {
        assert_eq!(normalize_term("COUNT( T1.\"Name\" )"), "count(name)");
        assert_eq!(normalize_term("price * 1.5"), "price*1.5");
    }
}
