//! Entry points shared by the cargo-fuzz targets and the seed-corpus test.
//!
//! Each function must return without panicking for any input.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::bench::{parse_dataset, Flavor};
use crate::critic::parse_critique;
use crate::gateway::{Cassette, Script};
use crate::judges::{extract_signature, parse_filter_text, parse_semantic_verdict};
use crate::pipeline::{parse_schema_selection, parse_semantic_plan, parse_signal_set, SqlCandidate, StagePromptSet};
use crate::proxy::{build_proxy, proxy_from_json, proxy_to_json, ContextProxy, DEFAULT_BUDGET_K};
use crate::refiner::parse_refiner_output;
use crate::template;

pub const TARGETS: [(&str, fn(&[u8])); 9] = [
    ("stage_contracts", stage_contracts),
    ("loop_contracts", loop_contracts),
    ("sql_signature", sql_signature),
    ("template", template_text),
    ("cassette_json", cassette_json),
    ("proxy_json", proxy_json),
    ("theta_json", theta_json),
    ("script_json", script_json),
    ("dataset", dataset),
];

fn text(data: &[u8]) -> &str {
    std::str::from_utf8(data).unwrap_or("")
}

/// Proxy for the schools fixture, built once per process.
fn proxy() -> &'static ContextProxy {
    static PROXY: OnceLock<ContextProxy> = OnceLock::new();
    PROXY.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("reflectsql-fuzz-{}", std::process::id()));
        let db = crate::testkit::california_schools(&dir).expect("fixture database");
        let proxy = build_proxy(&db, DEFAULT_BUDGET_K, None).expect("fixture proxy");
        let _ = std::fs::remove_dir_all(&dir);
        proxy
    })
}

/// First byte picks the stage; the rest is the model output.
pub fn stage_contracts(data: &[u8]) {
    let Some((&which, rest)) = data.split_first() else { return };
    let raw = text(rest);
    match which % 4 {
        0 => drop(parse_schema_selection(raw, proxy())),
        1 => drop(parse_signal_set(raw)),
        2 => drop(parse_semantic_plan(raw, proxy())),
        _ => drop(SqlCandidate::parse(raw, 0)),
    }
}

/// First byte picks judge, critic or refiner.
pub fn loop_contracts(data: &[u8]) {
    let Some((&which, rest)) = data.split_first() else { return };
    let raw = text(rest);
    match which % 3 {
        0 => drop(parse_semantic_verdict(raw)),
        1 => drop(parse_critique(raw)),
        _ => drop(parse_refiner_output(raw)),
    }
}

pub fn sql_signature(data: &[u8]) {
    let raw = text(data);
    let _ = extract_signature(raw);
    let _ = parse_filter_text(raw);
}

pub fn template_text(data: &[u8]) {
    let raw = text(data);
    let _ = template::tokenize(raw);
    let names: Vec<&str> = template::placeholders(raw);
    let _ = template::stray_braces(raw);
    let values: BTreeMap<&str, String> = names.iter().map(|n| (*n, "v".to_string())).collect();
    // With every placeholder bound, rendering fails exactly on stray braces.
    assert_eq!(template::render(raw, &values).is_ok(), template::stray_braces(raw).is_empty());
}

pub fn cassette_json(data: &[u8]) {
    if let Ok(c) = Cassette::from_json(text(data)) {
        let again = Cassette::from_json(&c.to_json()).expect("serialized cassette reloads");
        assert_eq!(again.to_json(), c.to_json());
    }
}

pub fn proxy_json(data: &[u8]) {
    if let Ok(p) = proxy_from_json(text(data)) {
        proxy_from_json(&proxy_to_json(&p)).expect("serialized proxy reloads");
    }
}

pub fn theta_json(data: &[u8]) {
    if let Ok(set) = StagePromptSet::from_json(text(data)) {
        let again = StagePromptSet::from_json(&set.to_json()).expect("serialized theta reloads");
        assert_eq!(again.to_json(), set.to_json());
    }
}

pub fn script_json(data: &[u8]) {
    let _ = Script::from_json(text(data));
}

/// First byte picks the flavor; every database counts as readable.
pub fn dataset(data: &[u8]) {
    let Some((&which, rest)) = data.split_first() else { return };
    let flavor = if which % 2 == 0 { Flavor::Spider } else { Flavor::Bird };
    let _ = parse_dataset(text(rest), flavor, |_| Ok(()));
}
