//! The decision loop: choose a processing plan for the task, execute it
//! over the decomposed chunks while maintaining the evidence state, and
//! produce the final answer — all under the hard window budget.
//!
//! Plan execution is rule-driven dispatch: the planning prompt picks one of
//! four options, each option runs a fixed executor, and the null-skip
//! protocol inside an executor maps irrelevant chunks to a move. No prompt
//! is ever built whose tokens plus the output allowance exceed the window;
//! the gateway enforces the same bound independently.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::gateway::{
    CompletionRequest, CompletionResponse, CostLedger, Gateway, GatewayError,
};
use crate::prompt::{
    parse_nullable, parse_option, parse_sentence_ids, PromptError, TemplateRegistry,
    DEFAULT_PLANNING_EXAMPLES, DEFAULT_REWRITE_EXAMPLES,
};
use crate::retrieve::{build_scorer, RetrieveError};
use crate::segment::{
    annotate_sentences, count_tokens, decompose, token_prefix, Chunk, ContextDocument,
    SentenceAnnotatedChunk,
};

// ---------------------------------------------------------------------------
// Actions, plans, tasks
// ---------------------------------------------------------------------------

/// The discrete action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    TaskUnderstanding,
    Retrieve,
    Move,
    Append,
    Merge,
    Answer,
    Aggregation,
}

/// The processing option chosen by the planning prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum PlanOption {
    /// Retrieve the most relevant chunks and answer from them.
    RetrieveThenAnswer,
    /// Summarize each chunk into a running summary, then aggregate.
    SummarizeMerge,
    /// Extract key sentences from each chunk, then aggregate.
    ExtractAppend,
    /// Scan chunks in order and answer as soon as the query is answerable.
    SequentialScan,
}

impl PlanOption {
    pub fn as_u8(self) -> u8 {
        match self {
            PlanOption::RetrieveThenAnswer => 1,
            PlanOption::SummarizeMerge => 2,
            PlanOption::ExtractAppend => 3,
            PlanOption::SequentialScan => 4,
        }
    }

    /// The option line shown by the planning prompt; used as the {strategy}
    /// binding of the rewrite prompt.
    pub fn description(self) -> &'static str {
        match self {
            PlanOption::RetrieveThenAnswer => {
                "[1]. Retrieve the chunk most relevant to the input query to support answer generation."
            }
            PlanOption::SummarizeMerge => {
                "[2]. Summarize each chunk and then aggregate the summaries after processing all chunks."
            }
            PlanOption::ExtractAppend => {
                "[3]. Extract key sentences from each chunk and then aggregate them after processing all chunks."
            }
            PlanOption::SequentialScan => {
                "[4]. Sequentially scan chunks and produce the answer as soon as the query can be answered."
            }
        }
    }
}

impl From<PlanOption> for u8 {
    fn from(value: PlanOption) -> Self {
        value.as_u8()
    }
}

impl TryFrom<u8> for PlanOption {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(PlanOption::RetrieveThenAnswer),
            2 => Ok(PlanOption::SummarizeMerge),
            3 => Ok(PlanOption::ExtractAppend),
            4 => Ok(PlanOption::SequentialScan),
            other => Err(format!("option must be 1..=4, got {other}")),
        }
    }
}

/// The plan produced by task understanding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub option: PlanOption,
    pub rewritten_query: Option<String>,
}

/// Task families; they drive the answer template, the scan direction, and
/// whether the query gets rewritten for chunk-wise processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Qa,
    Summarization,
    Fewshot,
    Synthetic,
    Code,
}

/// One task to solve over one long context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub query: Option<String>,
    pub answer_template: String,
    pub category: TaskCategory,
}

impl TaskSpec {
    pub fn new(
        name: impl Into<String>,
        query: Option<String>,
        answer_template: impl Into<String>,
        category: TaskCategory,
    ) -> Self {
        Self {
            name: name.into(),
            query,
            answer_template: answer_template.into(),
            category,
        }
    }

    /// Stand-in question for query-free tasks; chunk-wise prompts always
    /// carry a task statement.
    pub fn default_question(&self) -> String {
        match self.category {
            TaskCategory::Summarization => {
                "Write a comprehensive summary of the document.".to_string()
            }
            TaskCategory::Code => "Complete the next line of code.".to_string(),
            _ => "Answer the task using the document.".to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Evidence
// ---------------------------------------------------------------------------

/// One extracted piece of evidence, tagged with its source chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub chunk_index: usize,
    pub text: String,
}

/// The accumulated minimal necessary context: appended items plus an
/// optional running summary. `token_total` never exceeds the budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceState {
    items: Vec<EvidenceItem>,
    merged_summary: Option<String>,
    token_total: usize,
    budget: usize,
}

impl EvidenceState {
    pub fn new(budget: usize) -> Self {
        Self {
            items: Vec::new(),
            merged_summary: None,
            token_total: 0,
            budget,
        }
    }

    pub fn token_total(&self) -> usize {
        self.token_total
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn items(&self) -> &[EvidenceItem] {
        &self.items
    }

    pub fn summary(&self) -> Option<&str> {
        self.merged_summary.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty() && self.merged_summary.is_none()
    }

    /// Append the given sentences as one item for `chunk_index`, keeping
    /// only what fits in the remaining budget. Returns how many sentences
    /// were kept.
    pub fn push_sentences(&mut self, chunk_index: usize, sentences: &[&str]) -> usize {
        let mut kept = Vec::new();
        for s in sentences {
            let cost = count_tokens(s);
            if self.token_total + cost > self.budget {
                break;
            }
            self.token_total += cost;
            kept.push(*s);
        }
        let n = kept.len();
        if n > 0 {
            self.items.push(EvidenceItem {
                chunk_index,
                text: kept.join("\n"),
            });
        }
        n
    }

    /// Replace the running summary. The caller keeps summaries within the
    /// budget via re-compression; this clamps as a last resort.
    pub fn set_summary(&mut self, summary: String) {
        let item_tokens: usize = self.items.iter().map(|i| count_tokens(&i.text)).sum();
        let allowed = self.budget.saturating_sub(item_tokens);
        let clamped = token_prefix(&summary, allowed).to_string();
        self.token_total = item_tokens + count_tokens(&clamped);
        self.merged_summary = if clamped.is_empty() {
            None
        } else {
            Some(clamped)
        };
    }

    /// Evidence rendered for the answer prompt: items joined in source
    /// order, then the merged summary.
    pub fn context_text(&self) -> String {
        let mut items: Vec<&EvidenceItem> = self.items.iter().collect();
        items.sort_by_key(|i| i.chunk_index);
        let mut parts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
        if let Some(summary) = self.merged_summary.as_deref() {
            parts.push(summary);
        }
        parts.join("\n")
    }
}

// ---------------------------------------------------------------------------
// Trajectory
// ---------------------------------------------------------------------------

/// One step of a run: the chunk it touched (if any), the action taken, and
/// the hashes of the prompt/response pair behind it (bodies live in the
/// replay store).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub chunk: Option<usize>,
    pub action: Action,
    pub prompt_sha256: Option<String>,
    pub response_sha256: Option<String>,
}

/// The ordered, validated record of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub terminal: Option<Action>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrajectoryInvariantError {
    #[error("trajectory is empty")]
    Empty,
    #[error("first step must be task understanding, found {0:?}")]
    FirstStep(Action),
    #[error("terminal must be answer or aggregation, found {0:?}")]
    BadTerminal(Action),
    #[error("step after terminal action")]
    StepAfterTerminal,
    #[error("chunk cursor not strictly {expected} at step {step}")]
    CursorOrder { step: usize, expected: &'static str },
}

impl Trajectory {
    pub(crate) fn push(&mut self, step: TrajectoryStep) {
        debug_assert!(self.terminal.is_none(), "no steps after a terminal action");
        self.steps.push(step);
    }

    pub(crate) fn finish(&mut self, terminal: Action) {
        self.terminal = Some(terminal);
    }

    /// Check the structural invariants. `require_plan_step` is true for the
    /// adaptive loop (baselines have fixed plans and skip the planning
    /// step); `reverse` flips the expected cursor direction.
    pub fn validate(
        &self,
        require_plan_step: bool,
        reverse: bool,
    ) -> Result<(), TrajectoryInvariantError> {
        let Some(first) = self.steps.first() else {
            return Err(TrajectoryInvariantError::Empty);
        };
        if require_plan_step && first.action != Action::TaskUnderstanding {
            return Err(TrajectoryInvariantError::FirstStep(first.action));
        }
        match self.terminal {
            Some(Action::Answer) | Some(Action::Aggregation) => {}
            Some(other) => return Err(TrajectoryInvariantError::BadTerminal(other)),
            None => return Err(TrajectoryInvariantError::Empty),
        }
        let last = self.steps.last().expect("non-empty");
        if Some(last.action) != self.terminal {
            return Err(TrajectoryInvariantError::StepAfterTerminal);
        }
        for (i, step) in self.steps.iter().enumerate() {
            let is_terminal = matches!(step.action, Action::Answer | Action::Aggregation);
            if is_terminal && i + 1 != self.steps.len() {
                return Err(TrajectoryInvariantError::StepAfterTerminal);
            }
        }
        let mut cursor: Option<usize> = None;
        for (i, step) in self.steps.iter().enumerate() {
            if !matches!(step.action, Action::Move | Action::Append | Action::Merge) {
                continue;
            }
            let Some(chunk) = step.chunk else { continue };
            if let Some(prev) = cursor {
                let ok = if reverse { chunk < prev } else { chunk > prev };
                if !ok {
                    return Err(TrajectoryInvariantError::CursorOrder {
                        step: i,
                        expected: if reverse { "decreasing" } else { "increasing" },
                    });
                }
            }
            cursor = Some(chunk);
        }
        Ok(())
    }
}

/// The final product of a run: the answer, the validated trajectory, and
/// the cost ledger snapshot. Serializes with stable field names as the
/// per-run trace document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub task: String,
    pub strategy: String,
    pub plan: Option<StrategyPlan>,
    pub steps: Vec<TrajectoryStep>,
    pub terminal: Action,
    pub answer: String,
    pub low_confidence: bool,
    pub ledger: CostLedger,
}

impl AnswerRecord {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            steps: self.steps.clone(),
            terminal: Some(self.terminal),
        }
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum EngineErrorKind {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error("config: {0}")]
    Config(String),
}

/// A failed run, carrying the partial trajectory for diagnosis.
#[derive(Debug, Error)]
#[error("{kind}")]
pub struct EngineError {
    pub kind: EngineErrorKind,
    pub partial: Trajectory,
}

// ---------------------------------------------------------------------------
// Rule-driven action selection
// ---------------------------------------------------------------------------

/// Map a chunk response to the next action under the given plan option:
/// the null marker always means move on; anything else commits the
/// option's utilization action. Executors refine an extraction that names
/// no usable sentences into a move.
pub fn select_action(option: PlanOption, response: &str) -> Action {
    if parse_nullable(response).is_none() {
        return Action::Move;
    }
    match option {
        PlanOption::ExtractAppend => Action::Append,
        PlanOption::SummarizeMerge => Action::Merge,
        PlanOption::SequentialScan | PlanOption::RetrieveThenAnswer => Action::Answer,
    }
}

fn sha_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

type CallResult = (CompletionResponse, String, String);
type Hashes = (Option<String>, Option<String>);

/// How a sequential chunk pass behaves: scan direction, whether a null
/// response is recorded as a move, and the terminal action that closes the
/// pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ChunkPass {
    pub reverse: bool,
    pub null_is_move: bool,
    pub terminal: Action,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Runs one task over one document through a gateway. Create a fresh
/// gateway per run so the attached ledger covers exactly that run.
pub struct Engine<'a> {
    pub(crate) gateway: &'a Gateway,
    pub(crate) registry: &'a TemplateRegistry,
    pub(crate) config: &'a RunConfig,
}

impl<'a> Engine<'a> {
    pub fn new(gateway: &'a Gateway, registry: &'a TemplateRegistry, config: &'a RunConfig) -> Self {
        Self {
            gateway,
            registry,
            config,
        }
    }

    /// Execute the full decision loop and return the answer record.
    pub fn run(&self, task: &TaskSpec, doc: &ContextDocument) -> Result<AnswerRecord, EngineError> {
        let mut traj = Trajectory::default();
        match self.run_inner(task, doc, &mut traj) {
            Ok((plan, answer, low_confidence)) => Ok(AnswerRecord {
                task: task.name.clone(),
                strategy: "lcboost".to_string(),
                plan: Some(plan),
                terminal: traj.terminal.expect("run finished with a terminal action"),
                steps: traj.steps,
                answer,
                low_confidence,
                ledger: self.gateway.ledger_snapshot(),
            }),
            Err(kind) => Err(EngineError {
                kind,
                partial: traj,
            }),
        }
    }

    fn run_inner(
        &self,
        task: &TaskSpec,
        doc: &ContextDocument,
        traj: &mut Trajectory,
    ) -> Result<(StrategyPlan, String, bool), EngineErrorKind> {
        self.validate_run(task)?;
        let chunks = decompose(doc, self.config.chunk_budget);
        let plan = self.task_understanding(task, &chunks, traj)?;
        let question = self.effective_question(task, &plan);
        let reverse = task.category == TaskCategory::Code;
        let (answer, low_confidence) = match plan.option {
            PlanOption::RetrieveThenAnswer => {
                self.exec_retrieve_answer(task, &chunks, &question, traj)?
            }
            PlanOption::SummarizeMerge => {
                let pass = ChunkPass {
                    reverse,
                    null_is_move: true,
                    terminal: Action::Aggregation,
                };
                self.exec_merge(task, &chunks, &question, pass, traj)?
            }
            PlanOption::ExtractAppend => {
                let pass = ChunkPass {
                    reverse,
                    null_is_move: true,
                    terminal: Action::Aggregation,
                };
                self.exec_append(task, &chunks, &question, pass, traj)?
            }
            PlanOption::SequentialScan => self.exec_scan(task, &chunks, &question, reverse, traj)?,
        };
        Ok((plan, answer, low_confidence))
    }

    // -- planning ----------------------------------------------------------

    /// Render the planning prompt, parse the chosen option (one retry, then
    /// the fallback), and rewrite the query for synthetic tasks.
    pub(crate) fn task_understanding(
        &self,
        task: &TaskSpec,
        chunks: &[Chunk],
        traj: &mut Trajectory,
    ) -> Result<StrategyPlan, EngineErrorKind> {
        debug_assert!(!chunks.is_empty());
        let answer_body = self.registry.get(&task.answer_template)?.body.clone();
        let mut bindings = BTreeMap::new();
        bindings.insert("task_prompt".to_string(), answer_body.clone());
        bindings.insert(
            "examples".to_string(),
            DEFAULT_PLANNING_EXAMPLES.to_string(),
        );
        if let Some(q) = &task.query {
            bindings.insert("input_query".to_string(), q.clone());
        }
        let prompt = self.registry.render("task_understanding", &bindings)?;

        let (resp, ph, rh) = self.call("task_understanding", prompt.clone())?;
        let (option, ph, rh) = match parse_option(&resp.text) {
            Ok(opt) => (opt, ph, rh),
            Err(_) => {
                // One retry, then fall back: query-bearing tasks retrieve,
                // query-free tasks aggregate summaries.
                let (resp2, ph2, rh2) = self.call("task_understanding", prompt)?;
                match parse_option(&resp2.text) {
                    Ok(opt) => (opt, ph2, rh2),
                    Err(_) => {
                        let fallback = if task.query.is_some() { 1u8 } else { 2u8 };
                        (
                            crate::prompt::ParsedOption::new(fallback).expect("1 and 2 are valid"),
                            ph2,
                            rh2,
                        )
                    }
                }
            }
        };
        traj.push(TrajectoryStep {
            chunk: None,
            action: Action::TaskUnderstanding,
            prompt_sha256: Some(ph),
            response_sha256: Some(rh),
        });

        let option = PlanOption::try_from(option.get()).expect("parse_option yields 1..=4");
        let mut plan = StrategyPlan {
            option,
            rewritten_query: None,
        };
        if task.category == TaskCategory::Synthetic {
            let mut bindings = BTreeMap::new();
            bindings.insert("task_prompt".to_string(), answer_body);
            bindings.insert("strategy".to_string(), option.description().to_string());
            bindings.insert(
                "examples".to_string(),
                DEFAULT_REWRITE_EXAMPLES.to_string(),
            );
            if let Some(q) = &task.query {
                bindings.insert("input_query".to_string(), q.clone());
            }
            let prompt = self.registry.render("query_rewrite", &bindings)?;
            let (resp, _, _) = self.call("query_rewrite", prompt)?;
            if let Some(rewritten) = parse_nullable(&resp.text) {
                let budget = self.question_budget(task)?;
                plan.rewritten_query = Some(token_prefix(&rewritten, budget).to_string());
            }
        }
        Ok(plan)
    }

    pub(crate) fn effective_question(&self, task: &TaskSpec, plan: &StrategyPlan) -> String {
        plan.rewritten_query
            .clone()
            .or_else(|| task.query.clone())
            .unwrap_or_else(|| task.default_question())
    }

    // -- executors ---------------------------------------------------------

    /// Option 1: rank chunks, answer from as many whole top-ranked chunks
    /// as fit the answer window.
    fn exec_retrieve_answer(
        &self,
        task: &TaskSpec,
        chunks: &[Chunk],
        question: &str,
        traj: &mut Trajectory,
    ) -> Result<(String, bool), EngineErrorKind> {
        let selected = self.retrieve_indices(question, chunks, self.config.top_k)?;
        traj.push(TrajectoryStep {
            chunk: None,
            action: Action::Retrieve,
            prompt_sha256: None,
            response_sha256: None,
        });
        let overhead = self.answer_overhead(task, question)?;
        let allowance = self.config.prompt_allowance().saturating_sub(overhead);
        let mut total = 0usize;
        let mut chosen = Vec::new();
        for &idx in &selected {
            let t = chunks[idx].token_count;
            if total + t > allowance {
                break;
            }
            total += t;
            chosen.push(idx);
        }
        if chosen.is_empty() {
            if let Some(&first) = selected.first() {
                chosen.push(first); // a single chunk always fits by budget arithmetic
            }
        }
        chosen.sort_unstable();
        let context = chosen
            .iter()
            .map(|&i| chunks[i].text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        self.finalize(task, &context, question, Action::Answer, traj)
    }

    /// Top-k chunk indices for a query, rank order.
    pub(crate) fn retrieve_indices(
        &self,
        query: &str,
        chunks: &[Chunk],
        k: usize,
    ) -> Result<Vec<usize>, EngineErrorKind> {
        let scorer = build_scorer(self.config.scorer, chunks)?;
        Ok(scorer.rank(query, k).into_iter().map(|r| r.chunk).collect())
    }

    /// Option 2 (and the merge-family baselines): summarize each chunk
    /// into the running summary. With `null_is_move` unset the merge action
    /// is recorded even when the response was null and nothing changed.
    pub(crate) fn exec_merge(
        &self,
        task: &TaskSpec,
        chunks: &[Chunk],
        question: &str,
        pass: ChunkPass,
        traj: &mut Trajectory,
    ) -> Result<(String, bool), EngineErrorKind> {
        let mut evidence = EvidenceState::new(self.config.evidence_budget);
        let mut summary = String::new();
        for chunk in iterate(chunks, pass.reverse) {
            let (merged, hashes) = self.merge_chunk(chunk, question, &mut summary)?;
            let action = if merged || !pass.null_is_move {
                Action::Merge
            } else {
                Action::Move
            };
            traj.push(TrajectoryStep {
                chunk: Some(chunk.index),
                action,
                prompt_sha256: hashes.0,
                response_sha256: hashes.1,
            });
        }
        evidence.set_summary(summary);
        self.finalize(task, &evidence.context_text(), question, pass.terminal, traj)
    }

    /// One merge call: summarize `chunk` as a supplement to `summary`,
    /// re-compressing when the summary would exceed the evidence budget.
    pub(crate) fn merge_chunk(
        &self,
        chunk: &Chunk,
        question: &str,
        summary: &mut String,
    ) -> Result<(bool, Hashes), EngineErrorKind> {
        let mut bindings = BTreeMap::new();
        bindings.insert("article".to_string(), chunk.text.clone());
        bindings.insert(
            "previous_sum".to_string(),
            if summary.is_empty() {
                "None".to_string()
            } else {
                summary.clone()
            },
        );
        bindings.insert("question".to_string(), question.to_string());
        let prompt = self.registry.render("merge_summarize", &bindings)?;
        let (resp, ph, rh) = self.call("merge", prompt)?;
        let hashes = (Some(ph), Some(rh));

        let Some(supplement) = parse_nullable(&resp.text) else {
            return Ok((false, hashes));
        };
        // Backends that overrun their output allowance are clamped so the
        // next prompt stays within budget arithmetic.
        let supplement = token_prefix(&supplement, self.config.max_output_tokens);
        let mut new_summary = if summary.is_empty() {
            supplement.to_string()
        } else {
            format!("{summary}\n{supplement}")
        };
        if count_tokens(&new_summary) > self.config.evidence_budget {
            new_summary = self.recompress(&new_summary, question)?;
        }
        *summary = new_summary;
        Ok((true, hashes))
    }

    /// Summarize an over-budget running summary down to at most half the
    /// evidence budget, clamping if the backend overruns.
    fn recompress(&self, summary: &str, question: &str) -> Result<String, EngineErrorKind> {
        let overhead = self.template_overhead("recompress", &[("question", question)])?;
        let input_allowance = self.config.prompt_allowance().saturating_sub(overhead);
        let mut bindings = BTreeMap::new();
        bindings.insert(
            "summary".to_string(),
            token_prefix(summary, input_allowance).to_string(),
        );
        bindings.insert("question".to_string(), question.to_string());
        let prompt = self.registry.render("recompress", &bindings)?;
        let (resp, _, _) = self.call("recompress", prompt)?;
        let target = (self.config.evidence_budget / 2).max(1);
        Ok(token_prefix(resp.text.trim(), target).to_string())
    }

    /// Option 3 (and the append-family baselines): extract key sentences
    /// from each chunk into the evidence list.
    pub(crate) fn exec_append(
        &self,
        task: &TaskSpec,
        chunks: &[Chunk],
        question: &str,
        pass: ChunkPass,
        traj: &mut Trajectory,
    ) -> Result<(String, bool), EngineErrorKind> {
        let mut evidence = EvidenceState::new(self.config.evidence_budget);
        for chunk in iterate(chunks, pass.reverse) {
            let (appended, hashes) = self.append_chunk(chunk, question, &mut evidence)?;
            let action = if appended || !pass.null_is_move {
                Action::Append
            } else {
                Action::Move
            };
            traj.push(TrajectoryStep {
                chunk: Some(chunk.index),
                action,
                prompt_sha256: hashes.0,
                response_sha256: hashes.1,
            });
        }
        self.finalize(task, &evidence.context_text(), question, pass.terminal, traj)
    }

    /// One append pass over a chunk: annotate sentences, extract ids (in
    /// batches when identifiers inflate the render past the window), and
    /// push the selected sentence texts as one evidence item.
    pub(crate) fn append_chunk(
        &self,
        chunk: &Chunk,
        question: &str,
        evidence: &mut EvidenceState,
    ) -> Result<(bool, Hashes), EngineErrorKind> {
        let annotated = annotate_sentences(chunk);
        if annotated.sentences.is_empty() {
            return Ok((false, (None, None)));
        }
        let overhead = self.template_overhead("append_extract", &[("question", question)])?;
        let article_allowance = self.config.prompt_allowance().saturating_sub(overhead);

        let mut selected_ids: Vec<usize> = Vec::new();
        let mut hashes: Hashes = (None, None);
        for batch in plan_batches(&annotated, article_allowance) {
            let article = annotated.render_ids(batch);
            let article = token_prefix(&article, article_allowance);
            let mut bindings = BTreeMap::new();
            bindings.insert("article".to_string(), article.to_string());
            bindings.insert("question".to_string(), question.to_string());
            let prompt = self.registry.render("append_extract", &bindings)?;
            let (resp, ph, rh) = self.call("append", prompt)?;
            hashes = (Some(ph), Some(rh));
            if let Some(ids) = parse_sentence_ids(&resp.text) {
                for id in ids {
                    if !selected_ids.contains(&id) && annotated.sentence_text(id).is_some() {
                        selected_ids.push(id);
                    }
                }
            }
        }
        if selected_ids.is_empty() {
            return Ok((false, hashes));
        }
        let texts: Vec<&str> = selected_ids
            .iter()
            .filter_map(|&id| annotated.sentence_text(id))
            .collect();
        let kept = evidence.push_sentences(chunk.index, &texts);
        Ok((kept > 0, hashes))
    }

    /// Option 4: scan chunks with the null-protocol answer prompt and stop
    /// at the first answerable one.
    fn exec_scan(
        &self,
        task: &TaskSpec,
        chunks: &[Chunk],
        question: &str,
        reverse: bool,
        traj: &mut Trajectory,
    ) -> Result<(String, bool), EngineErrorKind> {
        for chunk in iterate(chunks, reverse) {
            let mut bindings = BTreeMap::new();
            bindings.insert("context".to_string(), chunk.text.clone());
            bindings.insert("question".to_string(), question.to_string());
            let prompt = self.registry.render("answer_with_null", &bindings)?;
            let (resp, ph, rh) = self.call("scan", prompt)?;
            match parse_nullable(&resp.text) {
                None => traj.push(TrajectoryStep {
                    chunk: Some(chunk.index),
                    action: Action::Move,
                    prompt_sha256: Some(ph),
                    response_sha256: Some(rh),
                }),
                Some(answer) => {
                    traj.push(TrajectoryStep {
                        chunk: Some(chunk.index),
                        action: Action::Answer,
                        prompt_sha256: Some(ph),
                        response_sha256: Some(rh),
                    });
                    traj.finish(Action::Answer);
                    return Ok((answer, false));
                }
            }
        }
        // Scan exhausted without an answer: ask over empty context and flag.
        self.finalize(task, "", question, Action::Answer, traj)
    }

    /// Render the task's answer prompt over the evidence context and record
    /// the terminal action. Empty evidence flags the answer low-confidence.
    pub(crate) fn finalize(
        &self,
        task: &TaskSpec,
        context: &str,
        question: &str,
        terminal: Action,
        traj: &mut Trajectory,
    ) -> Result<(String, bool), EngineErrorKind> {
        debug_assert!(matches!(terminal, Action::Answer | Action::Aggregation));
        let template = self.registry.get(&task.answer_template)?;
        let mut bindings = BTreeMap::new();
        bindings.insert("context".to_string(), context.to_string());
        if template.required.iter().any(|p| p == "question")
            || template.optional.iter().any(|p| p == "question")
        {
            bindings.insert("question".to_string(), question.to_string());
        }
        let prompt = self.registry.render(&task.answer_template, &bindings)?;
        let role = match terminal {
            Action::Aggregation => "aggregation",
            _ => "answer",
        };
        let (resp, ph, rh) = self.call(role, prompt)?;
        traj.push(TrajectoryStep {
            chunk: None,
            action: terminal,
            prompt_sha256: Some(ph),
            response_sha256: Some(rh),
        });
        traj.finish(terminal);
        let low_confidence = context.trim().is_empty();
        Ok((resp.text.trim().to_string(), low_confidence))
    }

    // -- plumbing ----------------------------------------------------------

    pub(crate) fn call(&self, role: &str, prompt: String) -> Result<CallResult, EngineErrorKind> {
        let prompt_hash = sha_hex(&prompt);
        let response = self.gateway.complete(
            role,
            CompletionRequest {
                prompt,
                max_output_tokens: self.config.max_output_tokens,
                temperature: self.config.temperature,
                stop_sequences: Vec::new(),
            },
        )?;
        let response_hash = sha_hex(&response.text);
        Ok((response, prompt_hash, response_hash))
    }

    /// Token count of a template rendered with the given bindings and empty
    /// strings for everything else.
    pub(crate) fn template_overhead(
        &self,
        name: &str,
        bindings: &[(&str, &str)],
    ) -> Result<usize, EngineErrorKind> {
        let template = self.registry.get(name)?;
        let mut map = BTreeMap::new();
        for p in template.required.iter().chain(template.optional.iter()) {
            map.insert(p.clone(), String::new());
        }
        for (k, v) in bindings {
            if map.contains_key(*k) {
                map.insert(k.to_string(), v.to_string());
            }
        }
        Ok(count_tokens(&self.registry.render(name, &map)?))
    }

    fn answer_overhead(&self, task: &TaskSpec, question: &str) -> Result<usize, EngineErrorKind> {
        self.template_overhead(&task.answer_template, &[("question", question)])
    }

    /// Tokens available for the question inside the static reserve, after
    /// the worst chunk-processing template's fixed text.
    fn question_budget(&self, task: &TaskSpec) -> Result<usize, EngineErrorKind> {
        let static_budget = self.config.prompt_reserve - self.config.max_output_tokens;
        let mut worst = 0usize;
        for name in [
            "merge_summarize",
            "append_extract",
            "answer_with_null",
            "recompress",
            task.answer_template.as_str(),
        ] {
            worst = worst.max(self.template_overhead(name, &[])?);
        }
        Ok(static_budget.saturating_sub(worst))
    }

    /// Reject configurations whose static prompt parts cannot fit the
    /// window before any call is made.
    pub(crate) fn validate_run(&self, task: &TaskSpec) -> Result<(), EngineErrorKind> {
        self.config
            .validate()
            .map_err(|e| EngineErrorKind::Config(e.to_string()))?;
        let question = task.query.clone().unwrap_or_else(|| task.default_question());
        let static_budget = self.config.prompt_reserve - self.config.max_output_tokens;
        for name in [
            "merge_summarize",
            "append_extract",
            "answer_with_null",
            "recompress",
            task.answer_template.as_str(),
        ] {
            let overhead = self.template_overhead(name, &[("question", &question)])?;
            if overhead > static_budget {
                return Err(EngineErrorKind::Config(format!(
                    "template {name} plus question needs {overhead} tokens; static reserve is {static_budget}"
                )));
            }
        }
        // Planning prompts carry no chunk text but must fit on their own.
        let answer_body = self.registry.get(&task.answer_template)?.body.clone();
        let mut bindings = BTreeMap::new();
        bindings.insert("task_prompt".to_string(), answer_body);
        bindings.insert(
            "examples".to_string(),
            DEFAULT_PLANNING_EXAMPLES.to_string(),
        );
        bindings.insert("input_query".to_string(), question.clone());
        let longest_description = [
            PlanOption::RetrieveThenAnswer,
            PlanOption::SummarizeMerge,
            PlanOption::ExtractAppend,
            PlanOption::SequentialScan,
        ]
        .into_iter()
        .map(|o| o.description())
        .max_by_key(|d| count_tokens(d))
        .expect("four options");
        bindings.insert("strategy".to_string(), longest_description.to_string());
        for name in ["task_understanding", "query_rewrite"] {
            let template = self.registry.get(name)?;
            let mut map = BTreeMap::new();
            for p in template.required.iter().chain(template.optional.iter()) {
                if let Some(v) = bindings.get(p) {
                    map.insert(p.clone(), v.clone());
                }
            }
            let rendered = self.registry.render(name, &map)?;
            if count_tokens(&rendered) > self.config.prompt_allowance() {
                return Err(EngineErrorKind::Config(format!(
                    "planning prompt {name} exceeds the window allowance"
                )));
            }
        }
        Ok(())
    }
}

fn iterate<'c>(chunks: &'c [Chunk], reverse: bool) -> Box<dyn Iterator<Item = &'c Chunk> + 'c> {
    if reverse {
        Box::new(chunks.iter().rev())
    } else {
        Box::new(chunks.iter())
    }
}

/// Group sentence ids into contiguous batches whose rendered form fits the
/// allowance. Identifier markup costs three tokens per sentence.
fn plan_batches(
    annotated: &SentenceAnnotatedChunk,
    allowance: usize,
) -> Vec<RangeInclusive<usize>> {
    let n = annotated.sentences.len();
    let mut batches = Vec::new();
    let mut start = 1usize;
    let mut acc = 0usize;
    for id in 1..=n {
        let cost = 3 + count_tokens(annotated.sentence_text(id).unwrap_or(""));
        if id > start && acc + cost > allowance {
            batches.push(start..=id - 1);
            start = id;
            acc = 0;
        }
        acc += cost;
    }
    batches.push(start..=n);
    batches
}
