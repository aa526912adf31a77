use super::{ColumnDescriptor, TableSummary, ValueSample};
use crate::gateway::{ModelGateway, ModelRequest};
use crate::stage::CallTag;

const SUMMARIZER_SYSTEM: &str = "Describe what one row of the given database table represents, \
in at most two short sentences. Output plain text only.";

/// Deterministic fallback summary.
pub fn template_summary(table: &str, descriptors: &[ColumnDescriptor]) -> String {
    let n = descriptors.len();
    let names: Vec<&str> = descriptors.iter().take(3).map(|d| d.column.as_str()).collect();
    let noun = if n == 1 { "column" } else { "columns" };
    if n <= 3 {
        format!("Table {table} with {n} {noun}: {}.", names.join(", "))
    } else {
        format!("Table {table} with {n} {noun}, including {}.", names.join(", "))
    }
}

/// Keeps at most two sentences. A sentence ends at `.`, `!` or `?`
/// followed by whitespace or the end of the text.
pub fn trim_sentences(text: &str, max: usize) -> String {
    let text = text.trim();
    let mut ends = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|(_, next)| next.is_whitespace()) {
            ends += 1;
            if ends == max {
                return text[..i + c.len_utf8()].to_string();
            }
        }
    }
    text.to_string()
}

fn user_text(table: &str, descriptors: &[ColumnDescriptor], samples: &[ValueSample]) -> String {
    let mut out = format!("Table: {table}\nColumns:\n");
    for d in descriptors {
        out.push_str(&format!("- {} {}\n", d.column, d.declared_type));
    }
    let enumerated: Vec<&ValueSample> = samples.iter().filter(|s| s.enumerated && !s.values.is_empty()).collect();
    if !enumerated.is_empty() {
        out.push_str("Sample values:\n");
        for s in enumerated {
            let shown: Vec<&str> = s.values.iter().take(5).map(String::as_str).collect();
            out.push_str(&format!("- {}: {}\n", s.column_ref, shown.join(", ")));
        }
    }
    out
}

/// Summary of one table. With a model, its first two sentences are used;
/// any model failure or empty answer falls back to the template.
pub fn summarize_table(
    table: &str,
    descriptors: &[ColumnDescriptor],
    samples: &[ValueSample],
    model: Option<&dyn ModelGateway>,
) -> TableSummary {
    let fallback = || template_summary(table, descriptors);
    let summary = match model {
        None => fallback(),
        Some(gateway) => {
            let request = ModelRequest::new(CallTag::Summarizer, SUMMARIZER_SYSTEM, user_text(table, descriptors, samples))
                .with_key(table, 0);
            match gateway.complete(&request) {
                Ok(resp) => {
                    let trimmed = trim_sentences(&resp.text, 2);
                    if trimmed.is_empty() {
                        fallback()
                    } else {
                        trimmed
                    }
                }
                Err(e) => {
                    tracing::warn!(%table, error = %e, "summarizer failed; using template summary");
                    fallback()
                }
            }
        }
    };
    TableSummary { table: table.to_string(), summary, row_count: None }
}
