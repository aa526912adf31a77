//! The offline database context: column descriptors, table summaries, join
//! candidates and cardinality-budgeted value samples.
//!
//! A proxy is built once per database ([`build_proxy`]), cached as JSON
//! ([`save_proxy`]/[`load_proxy`]) and rendered into prompt text on demand
//! ([`render_context`]).

mod build;
mod render;
mod summary;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use build::{build_proxy, content_hash, DEFAULT_BUDGET_K};
pub use render::render_context;
pub use summary::{summarize_table, template_summary, trim_sentences};

/// Version written into proxy cache files.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnDescriptor {
    pub table: String,
    pub column: String,
    pub declared_type: String,
    pub nullable: bool,
    pub is_primary_key: bool,
    pub key_likelihood: f64,
    pub distinct_count: Option<u64>,
}

impl ColumnDescriptor {
    pub fn qualified(&self) -> String {
        format!("{}.{}", self.table, self.column)
    }

    /// True for declared numeric affinities (INTEGER, REAL, NUMERIC, ...).
    pub fn is_numeric(&self) -> bool {
        let t = self.declared_type.to_ascii_uppercase();
        ["INT", "REAL", "FLOA", "DOUB", "NUMERIC", "DECIMAL", "BOOL"].iter().any(|k| t.contains(k))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSummary {
    pub table: String,
    pub summary: String,
    pub row_count: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinSource {
    DeclaredFk,
    SampleCorroborated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinCandidate {
    pub from_ref: String,
    pub to_ref: String,
    pub source: JoinSource,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CardinalityClass {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSample {
    pub column_ref: String,
    pub values: Vec<String>,
    pub cardinality_class: CardinalityClass,
    pub distinct_count: u64,
    pub enumerated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextProxy {
    pub db_id: String,
    pub descriptors: Vec<ColumnDescriptor>,
    pub summaries: Vec<TableSummary>,
    pub join_candidates: Vec<JoinCandidate>,
    pub value_samples: Vec<ValueSample>,
    pub budget_k: u32,
    pub content_hash: String,
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("database is unreadable: {0}")]
    UnreadableDatabase(String),
    #[error("schema introspection failed: {0}")]
    IntrospectionFailure(String),
    #[error("budget_k must be at least 1")]
    InvalidBudget,
    #[error("selection names unknown table `{0}`")]
    UnknownTable(String),
    #[error("proxy file has format version {found:?}, expected {FORMAT_VERSION}")]
    VersionMismatch { found: Option<serde_json::Value> },
    #[error("proxy file is corrupt: {0}")]
    CorruptFile(String),
    #[error("proxy i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ContextProxy {
    /// Table names in descriptor order, deduplicated.
    pub fn tables(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.descriptors.iter().map(|d| d.table.as_str()).filter(|t| seen.insert(*t)).collect()
    }

    /// Case-insensitive table lookup returning the stored spelling.
    pub fn resolve_table(&self, name: &str) -> Option<&str> {
        self.descriptors.iter().map(|d| d.table.as_str()).find(|t| t.eq_ignore_ascii_case(name))
    }

    /// Case-insensitive column lookup.
    pub fn column(&self, table: &str, column: &str) -> Option<&ColumnDescriptor> {
        self.descriptors
            .iter()
            .find(|d| d.table.eq_ignore_ascii_case(table) && d.column.eq_ignore_ascii_case(column))
    }

    pub fn columns_of<'a>(&'a self, table: &'a str) -> impl Iterator<Item = &'a ColumnDescriptor> + 'a {
        self.descriptors.iter().filter(move |d| d.table.eq_ignore_ascii_case(table))
    }

    /// Columns with this name in any table.
    pub fn columns_named<'a>(&'a self, column: &'a str) -> impl Iterator<Item = &'a ColumnDescriptor> + 'a {
        self.descriptors.iter().filter(move |d| d.column.eq_ignore_ascii_case(column))
    }

    pub fn primary_keys<'a>(&'a self, table: &'a str) -> impl Iterator<Item = &'a ColumnDescriptor> + 'a {
        self.columns_of(table).filter(|d| d.is_primary_key)
    }

    pub fn sample(&self, column_ref: &str) -> Option<&ValueSample> {
        self.value_samples.iter().find(|s| s.column_ref.eq_ignore_ascii_case(column_ref))
    }

    pub fn summary(&self, table: &str) -> Option<&TableSummary> {
        self.summaries.iter().find(|s| s.table.eq_ignore_ascii_case(table))
    }

    /// Checks every structural invariant; returns the violated ones.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.budget_k == 0 {
            out.push("budget_k is zero".to_string());
        }
        let refs: BTreeSet<String> = self.descriptors.iter().map(|d| d.qualified()).collect();
        for d in &self.descriptors {
            if !(0.0..=1.0).contains(&d.key_likelihood) {
                out.push(format!("{} key_likelihood out of range", d.qualified()));
            }
            if d.is_primary_key && d.key_likelihood != 1.0 {
                out.push(format!("{} is a primary key without likelihood 1", d.qualified()));
            }
        }
        for s in &self.summaries {
            if s.summary.trim().is_empty() {
                out.push(format!("empty summary for {}", s.table));
            }
        }
        for j in &self.join_candidates {
            for end in [&j.from_ref, &j.to_ref] {
                if !refs.contains(end) {
                    out.push(format!("join endpoint {end} is not a known column"));
                }
            }
            if !(0.0..=1.0).contains(&j.confidence) {
                out.push(format!("join {} -> {} confidence out of range", j.from_ref, j.to_ref));
            }
            if j.source == JoinSource::DeclaredFk && j.confidence != 1.0 {
                out.push(format!("declared join {} -> {} has confidence below 1", j.from_ref, j.to_ref));
            }
        }
        for s in &self.value_samples {
            if !refs.contains(&s.column_ref) {
                out.push(format!("value sample for unknown column {}", s.column_ref));
            }
            let low = s.cardinality_class == CardinalityClass::Low;
            if s.enumerated != low {
                out.push(format!("{}: enumerated flag disagrees with cardinality class", s.column_ref));
            }
            if s.enumerated && (s.values.len() as u64 != s.distinct_count || s.distinct_count > u64::from(self.budget_k)) {
                out.push(format!("{}: enumerated values do not match the distinct count within budget", s.column_ref));
            }
            if !s.enumerated && !s.values.is_empty() {
                out.push(format!("{}: suppressed column carries values", s.column_ref));
            }
        }
        out
    }

    /// Declared foreign keys as `(from, to)` pairs.
    pub fn declared_joins(&self) -> BTreeMap<&str, &str> {
        self.join_candidates
            .iter()
            .filter(|j| j.source == JoinSource::DeclaredFk)
            .map(|j| (j.from_ref.as_str(), j.to_ref.as_str()))
            .collect()
    }
}

pub fn proxy_to_json(proxy: &ContextProxy) -> String {
    let mut value = serde_json::to_value(proxy).expect("proxy always serializes");
    value
        .as_object_mut()
        .expect("proxy serializes to an object")
        .insert("format_version".into(), FORMAT_VERSION.into());
    serde_json::to_string_pretty(&value).expect("proxy value always serializes")
}

pub fn proxy_from_json(text: &str) -> Result<ContextProxy, ProxyError> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ProxyError::CorruptFile(e.to_string()))?;
    let object = value.as_object_mut().ok_or_else(|| ProxyError::CorruptFile("top level is not an object".into()))?;
    let version = object.remove("format_version");
    if version.as_ref().and_then(|v| v.as_u64()) != Some(u64::from(FORMAT_VERSION)) {
        return Err(ProxyError::VersionMismatch { found: version });
    }
    let proxy: ContextProxy = serde_json::from_value(value).map_err(|e| ProxyError::CorruptFile(e.to_string()))?;
    let violations = proxy.invariant_violations();
    if !violations.is_empty() {
        return Err(ProxyError::CorruptFile(violations.join("; ")));
    }
    Ok(proxy)
}

pub fn save_proxy(proxy: &ContextProxy, path: &Path) -> Result<(), ProxyError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, proxy_to_json(proxy))?;
    Ok(())
}

pub fn load_proxy(path: &Path) -> Result<ContextProxy, ProxyError> {
    proxy_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// A hand-built two-table proxy for unit tests that do not need SQLite.
    pub fn head_proxy() -> ContextProxy {
        let col = |table: &str, column: &str, ty: &str, pk: bool| ColumnDescriptor {
            table: table.into(),
            column: column.into(),
            declared_type: ty.into(),
            nullable: !pk,
            is_primary_key: pk,
            key_likelihood: if pk { 1.0 } else { 0.1 },
            distinct_count: Some(3),
        };
        let sample = |r: &str, values: &[&str]| ValueSample {
            column_ref: r.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            cardinality_class: CardinalityClass::Low,
            distinct_count: values.len() as u64,
            enumerated: true,
        };
        ContextProxy {
            db_id: "department_management".into(),
            descriptors: vec![
                col("head", "head_id", "INTEGER", true),
                col("head", "name", "TEXT", false),
                col("head", "born_state", "TEXT", false),
                col("head", "age", "REAL", false),
                col("department", "department_id", "INTEGER", true),
                col("department", "name", "TEXT", false),
            ],
            summaries: vec![
                TableSummary { table: "head".into(), summary: "Table head with 4 columns.".into(), row_count: Some(3) },
                TableSummary { table: "department".into(), summary: "Table department.".into(), row_count: Some(3) },
            ],
            join_candidates: vec![],
            value_samples: vec![
                sample("head.head_id", &["1", "2", "3"]),
                sample("head.name", &["Ann", "Bo", "Cy"]),
                sample("head.born_state", &["Alabama", "California", "Texas"]),
                sample("head.age", &["40.5", "52", "67"]),
                sample("department.department_id", &["1", "2", "3"]),
                sample("department.name", &["Treasury", "State", "Energy"]),
            ],
            budget_k: 20,
            content_hash: "0".repeat(64),
        }
    }
}
