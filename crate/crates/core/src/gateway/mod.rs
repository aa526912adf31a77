//! Uniform chat-completion access with interchangeable backends.
//!
//! Every model call in the system goes through [`ModelGateway::complete`].
//! Backends:
//!
//! - [`HttpBackend`]: OpenAI-compatible `/v1/chat/completions`.
//! - [`ReplayBackend`]: answers from a [`Cassette`] keyed by request fingerprint.
//! - [`ScriptedBackend`]: canned responses keyed by `(tag, example id, prompt version)`.
//!
//! [`RecordingGateway`] and [`CountingGateway`] wrap any backend.

mod cassette;
mod http;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{Cassette, CassetteEntry, CassetteError, SharedCassette};
pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use scripted::{Script, ScriptEntry, ScriptedBackend};

use crate::stage::CallTag;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Decoding {
    pub fn for_tag(tag: CallTag) -> Self {
        Decoding { temperature: 0.0, max_tokens: tag.max_tokens() }
    }
}

/// Routing key for the scripted backend. Not part of the fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScriptKey {
    pub example_id: String,
    /// Prompt version for stage calls and the refiner; iteration index for
    /// judge and critic calls.
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub stage_tag: CallTag,
    pub system_text: String,
    pub user_text: String,
    pub decoding: Decoding,
    pub script_key: Option<ScriptKey>,
}

/// Content hash of a request: SHA-256 over a canonical JSON encoding.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fingerprint(String);

impl Fingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Fingerprint of arbitrary labelled content (used for non-model cassette entries).
    pub fn of_parts(parts: &[&str]) -> Self {
        let canonical = serde_json::to_vec(parts).expect("string slices always serialize");
        Fingerprint(hex::encode(Sha256::digest(canonical)))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for Fingerprint {
    fn from(s: String) -> Self {
        Fingerprint(s)
    }
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    stage_tag: &'a str,
    system_text: &'a str,
    user_text: &'a str,
    temperature: f64,
    max_tokens: u32,
}

impl ModelRequest {
    pub fn new(stage_tag: CallTag, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        ModelRequest {
            stage_tag,
            system_text: system_text.into(),
            user_text: user_text.into(),
            decoding: Decoding::for_tag(stage_tag),
            script_key: None,
        }
    }

    pub fn with_key(mut self, example_id: impl Into<String>, version: u32) -> Self {
        self.script_key = Some(ScriptKey { example_id: example_id.into(), version });
        self
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let canonical = CanonicalRequest {
            stage_tag: self.stage_tag.as_str(),
            system_text: &self.system_text,
            user_text: &self.user_text,
            temperature: self.decoding.temperature,
            max_tokens: self.decoding.max_tokens,
        };
        let bytes = serde_json::to_vec(&canonical).expect("canonical request always serializes");
        Fingerprint(hex::encode(Sha256::digest(bytes)))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.decoding.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !self.decoding.temperature.is_finite() || self.decoding.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be a non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
    Scripted,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Http => "http",
            BackendKind::Replay => "replay",
            BackendKind::Scripted => "scripted",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("model endpoint returned an unusable response: {0}")]
    BadResponse(String),
    #[error("cassette has no entry for {stage_tag} request {fingerprint}")]
    CassetteMiss { fingerprint: Fingerprint, stage_tag: String },
    #[error("scripted backend has no response for {stage_tag} (example `{example_id}`, version {version:?})")]
    ScriptedExhausted { stage_tag: String, example_id: String, version: Option<u32> },
    #[error("cassette conflict: fingerprint {0} already maps to a different response")]
    Conflict(Fingerprint),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    /// Errors that invalidate a whole run rather than a single example.
    pub fn is_fatal(&self) -> bool {
        matches!(self, GatewayError::CassetteMiss { .. } | GatewayError::Conflict(_))
    }
}

pub trait ModelGateway: Send + Sync {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;
}

impl<G: ModelGateway + ?Sized> ModelGateway for &G {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: ModelGateway + ?Sized> ModelGateway for Box<G> {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<G: ModelGateway + ?Sized> ModelGateway for Arc<G> {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).complete(request)
    }
}

/// Serves responses recorded in a cassette; unknown fingerprints are errors.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        ReplayBackend { cassette }
    }

    pub fn cassette(&self) -> &Cassette {
        &self.cassette
    }
}

impl ModelGateway for ReplayBackend {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        match self.cassette.get(&fingerprint) {
            Some(text) => Ok(ModelResponse { text: text.to_string(), latency_ms: 0, backend: BackendKind::Replay }),
            None => Err(GatewayError::CassetteMiss { fingerprint, stage_tag: request.stage_tag.to_string() }),
        }
    }
}

/// Records every successful completion of the wrapped gateway.
pub struct RecordingGateway<G> {
    inner: G,
    cassette: SharedCassette,
}

impl<G: ModelGateway> RecordingGateway<G> {
    pub fn new(inner: G, cassette: SharedCassette) -> Self {
        RecordingGateway { inner, cassette }
    }

    pub fn cassette(&self) -> SharedCassette {
        self.cassette.clone()
    }
}

impl<G: ModelGateway> ModelGateway for RecordingGateway<G> {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        let mut cassette = self.cassette.lock().expect("cassette lock poisoned");
        cassette.record(request, &response)?;
        Ok(response)
    }
}

/// Counts calls per tag; the count is taken before the inner call, so failed
/// calls are counted too.
pub struct CountingGateway<G> {
    inner: G,
    counts: Mutex<BTreeMap<CallTag, usize>>,
}

impl<G: ModelGateway> CountingGateway<G> {
    pub fn new(inner: G) -> Self {
        CountingGateway { inner, counts: Mutex::new(BTreeMap::new()) }
    }

    pub fn count(&self, tag: CallTag) -> usize {
        self.counts.lock().expect("count lock poisoned").get(&tag).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.lock().expect("count lock poisoned").values().sum()
    }

    /// Calls for the four pipeline stages plus critic and refiner.
    pub fn loop_calls(&self) -> usize {
        self.counts
            .lock()
            .expect("count lock poisoned")
            .iter()
            .filter(|(tag, _)| matches!(tag, CallTag::Stage(_) | CallTag::Critic | CallTag::Refiner))
            .map(|(_, n)| n)
            .sum()
    }

    pub fn snapshot(&self) -> BTreeMap<CallTag, usize> {
        self.counts.lock().expect("count lock poisoned").clone()
    }

    pub fn reset(&self) {
        self.counts.lock().expect("count lock poisoned").clear();
    }
}

impl<G: ModelGateway> ModelGateway for CountingGateway<G> {
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        *self.counts.lock().expect("count lock poisoned").entry(request.stage_tag).or_insert(0) += 1;
        self.inner.complete(request)
    }
}
