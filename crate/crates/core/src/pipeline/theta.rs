//! Versioned stage prompts and their per-database store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{default_stage_prompt, required_placeholders};
use crate::stage::StageId;
use crate::template::{placeholders, stray_braces};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePrompt {
    pub text: String,
    pub version: u32,
}

/// History row appended on every committed revision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionRecord {
    pub stage: StageId,
    pub old_version: u32,
    pub new_version: u32,
    /// SHA-256 of the serialized critique that triggered the revision.
    pub critique_digest: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ThetaError {
    #[error("stale revision for {stage}: based on v{based_on}, current is v{current}")]
    StaleVersion { stage: StageId, based_on: u32, current: u32 },
    #[error("Θ store is corrupt: {0}")]
    Corrupt(String),
    #[error("Θ store i/o: {0}")]
    Io(String),
}

/// The four stage prompts of one database, with their revision history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePromptSet {
    pub db_id: String,
    prompts: BTreeMap<StageId, StagePrompt>,
    history: Vec<RevisionRecord>,
}

impl StagePromptSet {
    /// Shipped default prompts, each at version 1.
    pub fn defaults(db_id: impl Into<String>) -> Self {
        let prompts = StageId::ALL
            .into_iter()
            .map(|s| (s, StagePrompt { text: default_stage_prompt(s).to_string(), version: 1 }))
            .collect();
        StagePromptSet { db_id: db_id.into(), prompts, history: Vec::new() }
    }

    pub fn prompt(&self, stage: StageId) -> &StagePrompt {
        &self.prompts[&stage]
    }

    pub fn text(&self, stage: StageId) -> &str {
        &self.prompts[&stage].text
    }

    pub fn version(&self, stage: StageId) -> u32 {
        self.prompts[&stage].version
    }

    pub fn versions(&self) -> BTreeMap<StageId, u32> {
        self.prompts.iter().map(|(s, p)| (*s, p.version)).collect()
    }

    pub fn history(&self) -> &[RevisionRecord] {
        &self.history
    }

    /// Overrides a prompt text without touching history; for building
    /// fixtures and alternative starting prompts.
    pub fn with_text(mut self, stage: StageId, text: impl Into<String>) -> Self {
        self.prompts.get_mut(&stage).expect("all stages present").text = text.into();
        self
    }

    /// Replaces one stage prompt. Fails without side effects when
    /// `based_on` is not the current version.
    pub fn replace(
        &mut self,
        stage: StageId,
        based_on: u32,
        text: String,
        critique_digest: String,
        explanation: String,
    ) -> Result<u32, ThetaError> {
        let current = self.version(stage);
        if based_on != current {
            return Err(ThetaError::StaleVersion { stage, based_on, current });
        }
        let entry = self.prompts.get_mut(&stage).expect("all stages present");
        entry.text = text;
        entry.version = current + 1;
        self.history.push(RevisionRecord {
            stage,
            old_version: current,
            new_version: current + 1,
            critique_digest,
            explanation,
        });
        Ok(current + 1)
    }

    fn check(&self) -> Result<(), ThetaError> {
        let mut problems = Vec::new();
        for stage in StageId::ALL {
            let Some(p) = self.prompts.get(&stage) else {
                problems.push(format!("missing stage {stage}"));
                continue;
            };
            if p.version == 0 {
                problems.push(format!("{stage} has version 0"));
            }
            let present = placeholders(&p.text);
            for name in required_placeholders(stage) {
                if !present.contains(name) {
                    problems.push(format!("{stage} lacks {{{name}}}"));
                }
            }
            if !stray_braces(&p.text).is_empty() {
                problems.push(format!("{stage} has unescaped braces"));
            }
        }
        for r in &self.history {
            if r.new_version != r.old_version + 1 {
                problems.push(format!("history entry for {} skips versions", r.stage));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ThetaError::Corrupt(problems.join("; ")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("Θ always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ThetaError> {
        let set: StagePromptSet = serde_json::from_str(text).map_err(|e| ThetaError::Corrupt(e.to_string()))?;
        set.check()?;
        Ok(set)
    }
}

/// Θ files on disk, one `<db_id>.theta.json` per database.
#[derive(Debug, Clone)]
pub struct ThetaStore {
    dir: PathBuf,
}

impl ThetaStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ThetaStore { dir: dir.into() }
    }

    pub fn path_for(&self, db_id: &str) -> PathBuf {
        self.dir.join(format!("{db_id}.theta.json"))
    }

    /// Loads the stored Θ, or the defaults when none exists yet.
    pub fn load_or_default(&self, db_id: &str) -> Result<StagePromptSet, ThetaError> {
        let path = self.path_for(db_id);
        if !path.exists() {
            return Ok(StagePromptSet::defaults(db_id));
        }
        load_theta(&path)
    }

    pub fn save(&self, theta: &StagePromptSet) -> Result<(), ThetaError> {
        save_theta(theta, &self.path_for(&theta.db_id))
    }
}

pub fn load_theta(path: &Path) -> Result<StagePromptSet, ThetaError> {
    let text = fs::read_to_string(path).map_err(|e| ThetaError::Io(e.to_string()))?;
    StagePromptSet::from_json(&text)
}

pub fn save_theta(theta: &StagePromptSet, path: &Path) -> Result<(), ThetaError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ThetaError::Io(e.to_string()))?;
    }
    fs::write(path, theta.to_json()).map_err(|e| ThetaError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_start_at_version_one() {
        let t = StagePromptSet::defaults("db");
        assert!(StageId::ALL.iter().all(|s| t.version(*s) == 1));
        assert!(t.history().is_empty());
    }

    #[test]
    fn replace_bumps_only_one_stage() {
        let mut t = StagePromptSet::defaults("db");
        let before = t.clone();
        let v = t.replace(StageId::Stage2, 1, "new {question} {stage1}".into(), "d".into(), "e".into()).unwrap();
        assert_eq!(v, 2);
        for s in [StageId::Stage1, StageId::Plan, StageId::Sql] {
            assert_eq!(t.prompt(s), before.prompt(s));
        }
        assert_eq!(t.history().len(), 1);
    }

    #[test]
    fn stale_replace_leaves_theta_unchanged() {
        let mut t = StagePromptSet::defaults("db");
        t.replace(StageId::Sql, 1, "a {question} {semantic_plan}".into(), "d".into(), "e".into()).unwrap();
        let snapshot = t.clone();
        let err = t.replace(StageId::Sql, 1, "b".into(), "d".into(), "e".into()).unwrap_err();
        assert_eq!(err, ThetaError::StaleVersion { stage: StageId::Sql, based_on: 1, current: 2 });
        assert_eq!(t, snapshot);
    }

    #[test]
    fn store_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let store = ThetaStore::new(dir.path());
        let fresh = store.load_or_default("concert").unwrap();
        assert_eq!(fresh, StagePromptSet::defaults("concert"));
        let mut t = fresh.clone();
        t.replace(StageId::Plan, 1, "P {question} {stage1} {stage2}".into(), "d".into(), "e".into()).unwrap();
        store.save(&t).unwrap();
        assert_eq!(store.load_or_default("concert").unwrap(), t);

        let broken = t.to_json().replace("{stage2}", "");
        assert!(matches!(StagePromptSet::from_json(&broken), Err(ThetaError::Corrupt(_))));
        assert!(StagePromptSet::from_json("{").is_err());
    }
}
