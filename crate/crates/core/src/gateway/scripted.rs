use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendKind, GatewayError, ModelGateway, ModelRequest, ModelResponse};
use crate::stage::CallTag;

/// One scripted rule. `example_id = "*"` and `version = None` are wildcards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub tag: CallTag,
    #[serde(default = "wildcard")]
    pub example_id: String,
    #[serde(default)]
    pub version: Option<u32>,
    pub responses: Vec<String>,
}

fn wildcard() -> String {
    "*".to_string()
}

impl ScriptEntry {
    fn matches(&self, tag: CallTag, example_id: &str, version: Option<u32>) -> bool {
        self.tag == tag
            && (self.example_id == "*" || self.example_id == example_id)
            && (self.version.is_none() || self.version == version)
    }

    /// Exact keys beat wildcards: example id first, then version.
    fn specificity(&self) -> u8 {
        u8::from(self.example_id != "*") * 2 + u8::from(self.version.is_some())
    }
}

/// An ordered collection of scripted rules; persisted as a JSON array.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn new() -> Self {
        Script::default()
    }

    /// Adds a rule. Responses are served in order; the last one repeats.
    pub fn respond<I, S>(mut self, tag: CallTag, example_id: &str, version: Option<u32>, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.entries.push(ScriptEntry {
            tag,
            example_id: example_id.to_string(),
            version,
            responses: responses.into_iter().map(Into::into).collect(),
        });
        self
    }

    pub fn extend(mut self, other: Script) -> Self {
        self.entries.extend(other.entries);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Deterministic stub keyed by `(stage tag, example id, version)`.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    cursors: Mutex<HashMap<usize, usize>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        ScriptedBackend { script, cursors: Mutex::new(HashMap::new()) }
    }

    fn select(&self, tag: CallTag, example_id: &str, version: Option<u32>) -> Option<usize> {
        self.script
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.matches(tag, example_id, version) && !e.responses.is_empty())
            // Highest specificity wins; among equals, the first declared.
            .max_by(|(ia, a), (ib, b)| a.specificity().cmp(&b.specificity()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
    }
}

impl ModelGateway for ScriptedBackend {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let (example_id, version) = match &request.script_key {
            Some(key) => (key.example_id.as_str(), Some(key.version)),
            None => ("", None),
        };
        let Some(index) = self.select(request.stage_tag, example_id, version) else {
            return Err(GatewayError::ScriptedExhausted {
                stage_tag: request.stage_tag.to_string(),
                example_id: example_id.to_string(),
                version,
            });
        };
        let responses = &self.script.entries[index].responses;
        let mut cursors = self.cursors.lock().expect("script cursor lock poisoned");
        let cursor = cursors.entry(index).or_insert(0);
        let text = responses[(*cursor).min(responses.len() - 1)].clone();
        *cursor += 1;
        Ok(ModelResponse { text, latency_ms: 0, backend: BackendKind::Scripted })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::StageId;

    const STAGE1: CallTag = CallTag::Stage(StageId::Stage1);

    fn ask(backend: &ScriptedBackend, tag: CallTag, id: &str, version: u32) -> Result<String, GatewayError> {
        backend.complete(&ModelRequest::new(tag, "s", "u").with_key(id, version)).map(|r| r.text)
    }

    #[test]
    fn canned_selection_is_passed_through() {
        let backend = ScriptedBackend::new(Script::new().respond(STAGE1, "list heads", None, ["{\"tables\":[\"head\"]}"]));
        let out = backend.complete(&ModelRequest::new(STAGE1, "s", "u").with_key("list heads", 1)).unwrap();
        assert_eq!(out.text, "{\"tables\":[\"head\"]}");
        assert_eq!(out.backend, BackendKind::Scripted);
    }

    #[test]
    fn responses_advance_then_stick() {
        let backend = ScriptedBackend::new(Script::new().respond(STAGE1, "*", None, ["a", "b"]));
        assert_eq!(ask(&backend, STAGE1, "q", 1).unwrap(), "a");
        assert_eq!(ask(&backend, STAGE1, "q", 1).unwrap(), "b");
        assert_eq!(ask(&backend, STAGE1, "q", 1).unwrap(), "b");
    }

    #[test]
    fn specific_keys_beat_wildcards() {
        let backend = ScriptedBackend::new(
            Script::new()
                .respond(STAGE1, "*", None, ["any"])
                .respond(STAGE1, "q1", None, ["q1-any"])
                .respond(STAGE1, "q1", Some(2), ["q1-v2"]),
        );
        assert_eq!(ask(&backend, STAGE1, "q1", 1).unwrap(), "q1-any");
        assert_eq!(ask(&backend, STAGE1, "q1", 2).unwrap(), "q1-v2");
        assert_eq!(ask(&backend, STAGE1, "q9", 2).unwrap(), "any");
    }

    #[test]
    fn unknown_key_is_exhausted() {
        let backend = ScriptedBackend::new(Script::new().respond(STAGE1, "q1", Some(1), ["x"]));
        match ask(&backend, STAGE1, "q1", 2) {
            Err(GatewayError::ScriptedExhausted { version: Some(2), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(ask(&backend, CallTag::Judge, "q1", 1).is_err());
    }

    #[test]
    fn script_json_round_trip() {
        let script = Script::new().respond(CallTag::Refiner, "q", Some(3), ["r"]);
        let text = serde_json::to_string(&script).unwrap();
        assert_eq!(Script::from_json(&text).unwrap(), script);
        let short = Script::from_json(r#"[{"tag":"sql","responses":["SELECT 1;"]}]"#).unwrap();
        assert_eq!(short.entries[0].example_id, "*");
    }
}
