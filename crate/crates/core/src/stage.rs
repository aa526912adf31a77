//! Stage identifiers shared by the pipeline, critic, refiner and gateway.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the four prompt-driven generation stages.
///
/// Ordering follows pipeline order, so `min` over a set of stages yields the
/// earliest (most upstream) one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    /// Table and attribute selection.
    Stage1,
    /// Literal and constraint signal extraction.
    Stage2,
    /// Semantics-first planning.
    Plan,
    /// Plan-to-SQL realization.
    Sql,
}

impl StageId {
    pub const ALL: [StageId; 4] = [StageId::Stage1, StageId::Stage2, StageId::Plan, StageId::Sql];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::Stage1 => "stage1",
            StageId::Stage2 => "stage2",
            StageId::Plan => "plan",
            StageId::Sql => "sql",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// This stage and every stage after it, in execution order.
    pub fn downstream(self) -> &'static [StageId] {
        &Self::ALL[self.index()..]
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stage1" => Ok(StageId::Stage1),
            "stage2" => Ok(StageId::Stage2),
            "plan" => Ok(StageId::Plan),
            "sql" => Ok(StageId::Sql),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// Stage vocabulary of the critic contract, which only knows three stages.
///
/// `Stage3` covers planning and realization together; a restart for it
/// begins at [`StageId::Plan`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticStage {
    Stage1,
    Stage2,
    Stage3,
}

impl CriticStage {
    pub fn as_str(self) -> &'static str {
        match self {
            CriticStage::Stage1 => "stage1",
            CriticStage::Stage2 => "stage2",
            CriticStage::Stage3 => "stage3",
        }
    }

    pub fn restart_stage(self) -> StageId {
        match self {
            CriticStage::Stage1 => StageId::Stage1,
            CriticStage::Stage2 => StageId::Stage2,
            CriticStage::Stage3 => StageId::Plan,
        }
    }
}

impl fmt::Display for CriticStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriticStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stage1" => Ok(CriticStage::Stage1),
            "stage2" => Ok(CriticStage::Stage2),
            "stage3" => Ok(CriticStage::Stage3),
            other => Err(format!("unknown critic stage `{other}`")),
        }
    }
}

/// Tag carried by every model request; selects decoding budgets, scripted
/// responses and cassette bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CallTag {
    Stage(StageId),
    Critic,
    Refiner,
    Judge,
    Summarizer,
}

impl CallTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CallTag::Stage(stage) => stage.as_str(),
            CallTag::Critic => "critic",
            CallTag::Refiner => "refiner",
            CallTag::Judge => "judge",
            CallTag::Summarizer => "summarizer",
        }
    }

    /// Default completion budget for the tag.
    pub fn max_tokens(self) -> u32 {
        match self {
            CallTag::Stage(StageId::Stage1) => 512,
            CallTag::Stage(StageId::Stage2) => 768,
            CallTag::Stage(StageId::Plan) => 1024,
            CallTag::Stage(StageId::Sql) => 512,
            CallTag::Critic => 768,
            CallTag::Refiner => 4096,
            CallTag::Judge => 512,
            CallTag::Summarizer => 128,
        }
    }
}

impl fmt::Display for CallTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CallTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "critic" => Ok(CallTag::Critic),
            "refiner" => Ok(CallTag::Refiner),
            "judge" => Ok(CallTag::Judge),
            "summarizer" => Ok(CallTag::Summarizer),
            other => other.parse().map(CallTag::Stage).map_err(|_| format!("unknown call tag `{other}`")),
        }
    }
}

impl Serialize for CallTag {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CallTag {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}
