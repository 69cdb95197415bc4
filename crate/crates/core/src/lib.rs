//! Solve long-context language tasks with a short working window.
//!
//! A long input is decomposed into budgeted chunks and driven through a
//! small discrete action loop: a planning call picks one of four processing
//! options (retrieve-and-answer, merge-summarize, extract-append, or
//! sequential scan), the chosen executor walks the chunks while folding
//! relevant content into a bounded evidence state, and a terminal call
//! produces the answer. No prompt ever exceeds the configured window.
//!
//! The crate also ships the fixed-strategy baselines the adaptive loop is
//! compared against, QA scoring metrics, a token/energy cost model, and a
//! JSONL benchmark harness. Backends are pluggable: a remote
//! OpenAI-compatible API, a record/replay cache, or a scripted mock.

pub mod baseline;
pub mod config;
pub mod cost;
pub mod engine;
pub mod gateway;
pub mod harness;
pub mod metrics;
pub mod prompt;
pub mod retrieve;
pub mod segment;

pub use baseline::StrategyName;
pub use config::{BackendSelection, ConfigError, RunConfig, StrategyChoice};
pub use engine::{
    Action, AnswerRecord, Engine, EngineError, EvidenceState, PlanOption, StrategyPlan,
    TaskCategory, TaskSpec, Trajectory, TrajectoryStep,
};
pub use gateway::{
    Backend, BackendProfile, CompletionRequest, CompletionResponse, CostLedger, Gateway,
    GatewayError,
};
pub use harness::{DatasetManifest, DatasetRecord, Harness, IngestMode, RunReport, SuiteOutcome};
pub use metrics::Metric;
pub use prompt::TemplateRegistry;
pub use segment::{count_tokens, decompose, truncate_middle, Chunk, ContextDocument};
