use std::collections::{BTreeMap, BTreeSet};

use rusqlite::types::ValueRef;
use rusqlite::Connection;
use sha2::{Digest, Sha256};

use super::summary::summarize_table;
use super::{
    CardinalityClass, ColumnDescriptor, ContextProxy, JoinCandidate, JoinSource, ProxyError, ValueSample,
};
use crate::db::{quote_ident, DbHandle};
use crate::gateway::ModelGateway;

pub const DEFAULT_BUDGET_K: u32 = 20;

/// Rows sampled from a column when testing containment for undeclared joins.
const CORROBORATION_SAMPLE: usize = 100;
const CORROBORATION_THRESHOLD: f64 = 0.8;

struct RawColumn {
    name: String,
    declared_type: String,
    not_null: bool,
    pk: bool,
}

struct RawFk {
    from_table: String,
    from_column: String,
    to_table: String,
    to_column: Option<String>,
}

/// Hash of the database bytes and the sampling budget.
pub fn content_hash(db_bytes: &[u8], budget_k: u32) -> String {
    let mut hasher = Sha256::new();
    hasher.update(db_bytes);
    hasher.update(b"\0budget_k=");
    hasher.update(budget_k.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

fn introspection(e: impl std::fmt::Display) -> ProxyError {
    ProxyError::IntrospectionFailure(e.to_string())
}

fn list_tables(conn: &Connection) -> Result<Vec<String>, ProxyError> {
    let mut stmt = conn
        .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")
        .map_err(introspection)?;
    let names = stmt.query_map([], |r| r.get::<_, String>(0)).map_err(introspection)?;
    names.collect::<Result<_, _>>().map_err(introspection)
}

fn list_columns(conn: &Connection, table: &str) -> Result<Vec<RawColumn>, ProxyError> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(table))).map_err(introspection)?;
    let rows = stmt
        .query_map([], |r| {
            Ok(RawColumn {
                name: r.get(1)?,
                declared_type: r.get::<_, Option<String>>(2)?.unwrap_or_default(),
                not_null: r.get::<_, i64>(3)? != 0,
                pk: r.get::<_, i64>(5)? != 0,
            })
        })
        .map_err(introspection)?;
    rows.collect::<Result<_, _>>().map_err(introspection)
}

fn list_fks(conn: &Connection, table: &str) -> Result<Vec<RawFk>, ProxyError> {
    let mut stmt = conn.prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(table))).map_err(introspection)?;
    let rows = stmt
        .query_map([], |r| {
            Ok(RawFk {
                from_table: table.to_string(),
                to_table: r.get(2)?,
                from_column: r.get(3)?,
                to_column: r.get(4)?,
            })
        })
        .map_err(introspection)?;
    rows.collect::<Result<_, _>>().map_err(introspection)
}

/// Canonical text of a stored value: strings verbatim, numbers in decimal.
fn canonical(v: ValueRef<'_>) -> Option<String> {
    match v {
        ValueRef::Null => None,
        ValueRef::Integer(i) => Some(i.to_string()),
        ValueRef::Real(f) => Some(f.to_string()),
        ValueRef::Text(t) => Some(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Some(format!("x'{}'", hex::encode(b))),
    }
}

fn distinct_count(conn: &Connection, table: &str, column: &str) -> Result<u64, ProxyError> {
    let sql = format!("SELECT COUNT(DISTINCT {}) FROM {}", quote_ident(column), quote_ident(table));
    conn.query_row(&sql, [], |r| r.get::<_, i64>(0)).map(|n| n as u64).map_err(introspection)
}

fn distinct_values(conn: &Connection, table: &str, column: &str) -> Result<Vec<String>, ProxyError> {
    let c = quote_ident(column);
    let sql = format!("SELECT DISTINCT {c} FROM {} WHERE {c} IS NOT NULL ORDER BY {c}", quote_ident(table));
    let mut stmt = conn.prepare(&sql).map_err(introspection)?;
    let mut rows = stmt.query([]).map_err(introspection)?;
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(introspection)? {
        if let Some(v) = canonical(row.get_ref(0).map_err(introspection)?) {
            out.push(v);
        }
    }
    Ok(out)
}

fn row_count(conn: &Connection, table: &str) -> Result<u64, ProxyError> {
    crate::db::table_row_count(conn, table).map_err(introspection)
}

fn is_id_like(column: &str) -> bool {
    let lower = column.to_ascii_lowercase();
    lower.ends_with("_id")
}

fn key_likelihood(column: &str, is_pk: bool, fk_endpoint: bool) -> f64 {
    match (is_pk, is_id_like(column), fk_endpoint) {
        (true, _, _) => 1.0,
        (false, true, true) => 0.8,
        (false, true, false) => 0.5,
        _ => 0.1,
    }
}

/// Declared FKs resolved to stored table/column spellings. Dangling
/// references are dropped with a warning.
fn resolve_fks(raw: Vec<RawFk>, columns: &BTreeMap<String, Vec<RawColumn>>) -> Vec<(String, String)> {
    let find_table = |name: &str| columns.keys().find(|t| t.eq_ignore_ascii_case(name)).cloned();
    let find_column = |table: &str, name: &str| {
        columns.get(table).and_then(|cols| cols.iter().find(|c| c.name.eq_ignore_ascii_case(name)).map(|c| c.name.clone()))
    };
    let mut out = BTreeSet::new();
    for fk in raw {
        let Some(to_table) = find_table(&fk.to_table) else {
            tracing::warn!(from = %fk.from_table, to = %fk.to_table, "foreign key references a missing table; skipped");
            continue;
        };
        let to_column = match &fk.to_column {
            Some(c) => find_column(&to_table, c),
            None => {
                let pks: Vec<_> = columns[&to_table].iter().filter(|c| c.pk).collect();
                (pks.len() == 1).then(|| pks[0].name.clone())
            }
        };
        let from_column = find_column(&fk.from_table, &fk.from_column);
        match (from_column, to_column) {
            (Some(from), Some(to)) => {
                out.insert((format!("{}.{}", fk.from_table, from), format!("{to_table}.{to}")));
            }
            _ => tracing::warn!(from = %fk.from_table, to = %to_table, "foreign key names a missing column; skipped"),
        }
    }
    out.into_iter().collect()
}

fn singular(name: &str) -> &str {
    name.strip_suffix('s').unwrap_or(name)
}

/// Undeclared joins inferred by value containment. Only used when the
/// database declares no foreign keys at all.
fn corroborated_joins(conn: &Connection, descriptors: &[ColumnDescriptor]) -> Result<Vec<JoinCandidate>, ProxyError> {
    let mut out = Vec::new();
    for from in descriptors.iter().filter(|d| is_id_like(&d.column) || d.is_primary_key) {
        for to in descriptors.iter().filter(|d| d.is_primary_key && !d.table.eq_ignore_ascii_case(&from.table)) {
            let same_name = from.column.eq_ignore_ascii_case(&to.column);
            let named_after = to.column.eq_ignore_ascii_case("id")
                && from.column.eq_ignore_ascii_case(&format!("{}_id", singular(&to.table)));
            if !(same_name || named_after) || (from.is_primary_key && same_name && from.table > to.table) {
                continue;
            }
            let sample_sql = format!(
                "SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL ORDER BY {c} LIMIT {CORROBORATION_SAMPLE}",
                c = quote_ident(&from.column),
                t = quote_ident(&from.table)
            );
            let probe_sql =
                format!("SELECT 1 FROM {} WHERE {} = ?1 LIMIT 1", quote_ident(&to.table), quote_ident(&to.column));
            let mut sample_stmt = conn.prepare(&sample_sql).map_err(introspection)?;
            let mut probe = conn.prepare(&probe_sql).map_err(introspection)?;
            let values: Vec<rusqlite::types::Value> = sample_stmt
                .query_map([], |r| r.get(0))
                .map_err(introspection)?
                .collect::<Result<_, _>>()
                .map_err(introspection)?;
            if values.is_empty() {
                continue;
            }
            let mut hits = 0usize;
            for v in &values {
                if probe.exists([v]).map_err(introspection)? {
                    hits += 1;
                }
            }
            let confidence = hits as f64 / values.len() as f64;
            if confidence >= CORROBORATION_THRESHOLD {
                out.push(JoinCandidate {
                    from_ref: from.qualified(),
                    to_ref: to.qualified(),
                    source: JoinSource::SampleCorroborated,
                    confidence,
                });
            }
        }
    }
    Ok(out)
}

/// Builds the context proxy for one database. Without a summarizer the
/// result is a pure function of the database bytes and `budget_k`.
pub fn build_proxy(
    db: &DbHandle,
    budget_k: u32,
    summarizer: Option<&dyn ModelGateway>,
) -> Result<ContextProxy, ProxyError> {
    if budget_k == 0 {
        return Err(ProxyError::InvalidBudget);
    }
    let bytes = db.bytes().map_err(|e| ProxyError::UnreadableDatabase(e.to_string()))?;
    let conn = db.open().map_err(|e| ProxyError::UnreadableDatabase(e.to_string()))?;

    let tables = list_tables(&conn)?;
    let mut columns = BTreeMap::new();
    let mut raw_fks = Vec::new();
    for table in &tables {
        let cols = list_columns(&conn, table)?;
        if cols.is_empty() {
            return Err(ProxyError::IntrospectionFailure(format!("table `{table}` has no columns")));
        }
        raw_fks.extend(list_fks(&conn, table)?);
        columns.insert(table.clone(), cols);
    }
    let fks = resolve_fks(raw_fks, &columns);
    let fk_endpoints: BTreeSet<&str> = fks.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();

    let mut descriptors = Vec::new();
    let mut value_samples = Vec::new();
    for (table, cols) in &columns {
        for c in cols {
            let qualified = format!("{table}.{}", c.name);
            let distinct = distinct_count(&conn, table, &c.name)?;
            descriptors.push(ColumnDescriptor {
                table: table.clone(),
                column: c.name.clone(),
                declared_type: c.declared_type.clone(),
                nullable: !c.not_null && !c.pk,
                is_primary_key: c.pk,
                key_likelihood: key_likelihood(&c.name, c.pk, fk_endpoints.contains(qualified.as_str())),
                distinct_count: Some(distinct),
            });
            let enumerated = distinct <= u64::from(budget_k);
            let values = if enumerated { distinct_values(&conn, table, &c.name)? } else { Vec::new() };
            if enumerated && values.len() as u64 != distinct {
                return Err(ProxyError::IntrospectionFailure(format!(
                    "{qualified}: {} distinct values listed but {distinct} counted",
                    values.len()
                )));
            }
            value_samples.push(ValueSample {
                column_ref: qualified,
                values,
                cardinality_class: if enumerated { CardinalityClass::Low } else { CardinalityClass::High },
                distinct_count: distinct,
                enumerated,
            });
        }
    }

    let mut join_candidates: Vec<JoinCandidate> = fks
        .into_iter()
        .map(|(from_ref, to_ref)| JoinCandidate { from_ref, to_ref, source: JoinSource::DeclaredFk, confidence: 1.0 })
        .collect();
    if join_candidates.is_empty() {
        join_candidates = corroborated_joins(&conn, &descriptors)?;
    }

    let mut summaries = Vec::new();
    for table in &tables {
        let table_descriptors: Vec<ColumnDescriptor> =
            descriptors.iter().filter(|d| &d.table == table).cloned().collect();
        let table_samples: Vec<ValueSample> = value_samples
            .iter()
            .filter(|s| s.column_ref.split_once('.').map(|(t, _)| t) == Some(table.as_str()))
            .cloned()
            .collect();
        let mut summary = summarize_table(table, &table_descriptors, &table_samples, summarizer);
        summary.row_count = Some(row_count(&conn, table)?);
        summaries.push(summary);
    }

    let proxy = ContextProxy {
        db_id: db.db_id.clone(),
        descriptors,
        summaries,
        join_candidates,
        value_samples,
        budget_k,
        content_hash: content_hash(&bytes, budget_k),
    };
    debug_assert!(proxy.invariant_violations().is_empty(), "{:?}", proxy.invariant_violations());
    Ok(proxy)
}
