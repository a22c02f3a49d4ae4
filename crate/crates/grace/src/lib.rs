//! Gated-refinement / adaptive-compression prompt optimization.
//!
//! The optimization loop searches the discrete space of natural-language
//! prompts for a base model. Each iteration partitions the training split
//! into successes and failures under the current prompt, asks an optimizer
//! model to revise the prompt from a small batch of both (the feedback
//! regulation gate), and adopts the candidate only if it strictly improves
//! the validation score (the update rejection gate). After `K` consecutive
//! blocked updates the prompt is compressed into a distilled form and
//! adopted unconditionally, restarting local refinement from a simpler
//! starting point.
//!
//! Crate layout mirrors the moving parts:
//!
//! - [`dataset`]: sample loading, split construction, task metadata
//! - [`prompt`]: every text the two models see, plus candidate extraction
//! - [`scoring`]: answer extraction and exact-rational metrics
//! - [`gateway`]: completion backends (HTTP, scripted) with retry and
//!   usage capture
//! - [`engine`]: the gated refinement / compression loop itself
//! - [`telemetry`]: usage ledger, cost estimation, trace and checkpoint
//!   persistence
//! - [`sim`]: a synthetic task and rule-based model pair for offline
//!   property tests and desk-scale demos
//! - [`config`] / [`cli`]: run configuration and the `grace` command

pub mod cli;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod gateway;
pub mod prompt;
pub mod rng;
pub mod scoring;
pub mod sim;
pub mod telemetry;

pub use dataset::{DatasetSplits, Sample, SplitCounts, TaskSpec};
pub use engine::{Engine, EngineConfig, EngineState, EvalReport, RunResult, StepEvent, StepKind};
pub use gateway::{
    Backend, CompletionRequest, CompletionResult, Gateway, Role, ScriptedProvider, Usage,
};
pub use prompt::{CaseRecord, MetaPromptTemplates, PromptOrigin, PromptText};
pub use scoring::{Metric, Score};
pub use telemetry::{PricingTable, Telemetry, UsageLedger};
