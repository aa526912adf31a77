use std::collections::BTreeSet;
use std::fmt::Write;

use super::{ContextProxy, JoinSource, ProxyError};
use crate::pipeline::SchemaSelection;

fn table_of(column_ref: &str) -> &str {
    column_ref.split_once('.').map_or(column_ref, |(t, _)| t)
}

/// Renders the schema block (tables, typed columns, join list) and the value
/// block (enumerated columns only). A selection restricts both to its tables.
pub fn render_context(proxy: &ContextProxy, selection: Option<&SchemaSelection>) -> Result<String, ProxyError> {
    let tables: Vec<&str> = match selection {
        None => proxy.tables(),
        Some(sel) => {
            let mut seen = BTreeSet::new();
            let mut out = Vec::new();
            for t in &sel.tables {
                let resolved = proxy.resolve_table(t).ok_or_else(|| ProxyError::UnknownTable(t.clone()))?;
                if seen.insert(resolved) {
                    out.push(resolved);
                }
            }
            out
        }
    };
    let included = |column_ref: &str| tables.iter().any(|t| t.eq_ignore_ascii_case(table_of(column_ref)));

    let mut out = String::from("Tables:\n");
    for table in &tables {
        let summary = proxy.summary(table).map(|s| s.summary.as_str()).unwrap_or("");
        let _ = writeln!(out, "- {table}: {summary}");
        for d in proxy.columns_of(table) {
            let ty = if d.declared_type.is_empty() { "ANY" } else { d.declared_type.as_str() };
            let pk = if d.is_primary_key { " PRIMARY KEY" } else { "" };
            let _ = writeln!(out, "  - {} {ty}{pk}", d.column);
        }
    }

    let joins: Vec<_> =
        proxy.join_candidates.iter().filter(|j| included(&j.from_ref) && included(&j.to_ref)).collect();
    if !joins.is_empty() {
        out.push_str("Foreign keys:\n");
        for j in joins {
            match j.source {
                JoinSource::DeclaredFk => {
                    let _ = writeln!(out, "- {} -> {}", j.from_ref, j.to_ref);
                }
                JoinSource::SampleCorroborated => {
                    let _ = writeln!(out, "- {} -> {} (inferred, confidence {:.2})", j.from_ref, j.to_ref, j.confidence);
                }
            }
        }
    }

    let samples: Vec<_> =
        proxy.value_samples.iter().filter(|s| s.enumerated && !s.values.is_empty() && included(&s.column_ref)).collect();
    if !samples.is_empty() {
        out.push_str("Value instances:\n");
        for s in samples {
            let values = serde_json::to_string(&s.values).expect("string lists always serialize");
            let _ = writeln!(out, "- {}: {values}", s.column_ref);
        }
    }
    Ok(out.trim_end().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::fixtures::head_proxy;
    use crate::proxy::CardinalityClass;

    fn selection(tables: &[&str]) -> SchemaSelection {
        SchemaSelection { tables: tables.iter().map(|t| t.to_string()).collect(), attributes: vec![] }
    }

    #[test]
    fn full_rendering_lists_values() {
        let text = render_context(&head_proxy(), None).unwrap();
        assert!(text.starts_with("Tables:\n- head:"));
        assert!(text.contains("  - born_state TEXT"));
        assert!(text.contains("- head.born_state: [\"Alabama\",\"California\",\"Texas\"]"));
    }

    #[test]
    fn suppressed_column_shows_name_only() {
        let mut p = head_proxy();
        let s = p.value_samples.iter_mut().find(|s| s.column_ref == "head.name").unwrap();
        s.values.clear();
        s.enumerated = false;
        s.cardinality_class = CardinalityClass::High;
        let text = render_context(&p, None).unwrap();
        assert!(text.contains("  - name TEXT"));
        assert!(!text.contains("head.name:"));
        assert!(!text.contains("Ann"));
    }

    #[test]
    fn selection_omits_other_tables() {
        let mut p = head_proxy();
        p.descriptors.push(crate::proxy::ColumnDescriptor {
            table: "management".into(),
            column: "temporary_acting".into(),
            declared_type: "TEXT".into(),
            nullable: true,
            is_primary_key: false,
            key_likelihood: 0.1,
            distinct_count: Some(2),
        });
        let text = render_context(&p, Some(&selection(&["head", "department"]))).unwrap();
        assert!(text.contains("- head:"));
        assert!(text.contains("- department:"));
        assert!(!text.contains("management"));
        assert!(!text.contains("temporary_acting"));
        let only_head = render_context(&p, Some(&selection(&["HEAD"]))).unwrap();
        assert!(!only_head.contains("Treasury"));
    }

    #[test]
    fn unknown_selected_table_is_an_error() {
        let err = render_context(&head_proxy(), Some(&selection(&["nope"]))).unwrap_err();
        assert!(matches!(err, ProxyError::UnknownTable(t) if t == "nope"));
    }
}
