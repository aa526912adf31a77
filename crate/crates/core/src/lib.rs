//! Multi-stage text-to-SQL generation with stage-level reflective refinement.
//!
//! A question is answered by four prompt-driven stages (schema selection,
//! literal signals, semantic plan, SQL). Candidates are judged by an
//! interpreter and a semantic judge; failures are attributed to a stage by a
//! critic, and that stage's prompt is revised and persisted before the stage
//! and everything downstream of it is rerun.
//!
//! Module map:
//!
//! - [`gateway`]: model access (HTTP, cassette replay, scripted stub).
//! - [`proxy`]: offline database context (descriptors, joins, value samples).
//! - [`pipeline`]: stage prompts, output contracts and composition.
//! - [`judges`]: interpreter verdicts, SQL signatures and coverage.
//! - [`critic`], [`refiner`], [`orchestrator`]: the refinement loop.
//! - [`bench`]: dataset ingestion, EX/VES and reports.

pub mod bench;
pub mod critic;
pub mod db;
#[doc(hidden)]
pub mod fuzzing;
pub mod gateway;
pub mod judges;
pub mod orchestrator;
pub mod pipeline;
pub mod prompts;
pub mod proxy;
pub mod refiner;
pub mod stage;
pub mod template;
pub mod testkit;

pub use stage::{CallTag, CriticStage, StageId};
