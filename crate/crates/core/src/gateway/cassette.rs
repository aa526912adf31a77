use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Fingerprint, GatewayError, ModelRequest, ModelResponse};

/// One persisted cassette row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteEntry {
    pub fingerprint: Fingerprint,
    pub stage_tag: String,
    pub response_text: String,
}

#[derive(Debug, Error)]
pub enum CassetteError {
    #[error("cassette i/o: {0}")]
    Io(#[from] io::Error),
    #[error("cassette is not valid JSON: {0}")]
    Corrupt(#[from] serde_json::Error),
    #[error("cassette lists fingerprint {0} twice with different responses")]
    Conflict(Fingerprint),
}

/// Fingerprint → response map. Serialization is sorted by fingerprint so the
/// same recording always produces the same file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Cassette {
    entries: BTreeMap<Fingerprint, CassetteEntry>,
}

/// Cassette shared between a recorder and other writers in one run.
pub type SharedCassette = Arc<Mutex<Cassette>>;

impl Cassette {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fingerprint: &Fingerprint) -> Option<&str> {
        self.entries.get(fingerprint).map(|e| e.response_text.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = &CassetteEntry> {
        self.entries.values()
    }

    pub fn record(&mut self, request: &ModelRequest, response: &ModelResponse) -> Result<(), GatewayError> {
        self.insert(request.fingerprint(), request.stage_tag.as_str(), &response.text)
    }

    /// Inserts a raw entry. Re-inserting an identical pair is a no-op.
    pub fn insert(&mut self, fingerprint: Fingerprint, stage_tag: &str, text: &str) -> Result<(), GatewayError> {
        if let Some(existing) = self.entries.get(&fingerprint) {
            if existing.response_text == text {
                return Ok(());
            }
            return Err(GatewayError::Conflict(fingerprint));
        }
        self.entries.insert(
            fingerprint.clone(),
            CassetteEntry { fingerprint, stage_tag: stage_tag.to_string(), response_text: text.to_string() },
        );
        Ok(())
    }

    /// Replaces the text of an existing entry. Used by tooling that edits
    /// recordings on purpose.
    pub fn overwrite(&mut self, fingerprint: &Fingerprint, text: &str) -> bool {
        match self.entries.get_mut(fingerprint) {
            Some(entry) => {
                entry.response_text = text.to_string();
                true
            }
            None => false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, CassetteError> {
        let rows: Vec<CassetteEntry> = serde_json::from_str(text)?;
        let mut cassette = Cassette::default();
        for row in rows {
            let fingerprint = row.fingerprint.clone();
            cassette
                .insert(row.fingerprint, &row.stage_tag, &row.response_text)
                .map_err(|_| CassetteError::Conflict(fingerprint))?;
        }
        Ok(cassette)
    }

    pub fn to_json(&self) -> String {
        let rows: Vec<&CassetteEntry> = self.entries.values().collect();
        serde_json::to_string_pretty(&rows).expect("cassette rows always serialize")
    }

    pub fn load(path: &Path) -> Result<Self, CassetteError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CassetteError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn into_shared(self) -> SharedCassette {
        Arc::new(Mutex::new(self))
    }
}
