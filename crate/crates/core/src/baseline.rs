//! Fixed-strategy baselines: the same primitives as the decision loop, but
//! with the plan hardwired by name instead of chosen by a planning call.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    Action, AnswerRecord, ChunkPass, Engine, EngineError, EngineErrorKind, EvidenceState,
    TaskCategory, TaskSpec, Trajectory, TrajectoryStep,
};
use crate::segment::{decompose, truncate_middle, Chunk, ContextDocument};

/// The eight fixed strategies of the ablation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    RetrieveOnly,
    MergeOnly,
    AppendOnly,
    MergeMove,
    AppendMove,
    RetrieveMove,
    BruteForce,
    Random,
}

impl StrategyName {
    pub const ALL: [StrategyName; 8] = [
        StrategyName::RetrieveOnly,
        StrategyName::MergeOnly,
        StrategyName::AppendOnly,
        StrategyName::MergeMove,
        StrategyName::AppendMove,
        StrategyName::RetrieveMove,
        StrategyName::BruteForce,
        StrategyName::Random,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyName::RetrieveOnly => "retrieve_only",
            StrategyName::MergeOnly => "merge_only",
            StrategyName::AppendOnly => "append_only",
            StrategyName::MergeMove => "merge_move",
            StrategyName::AppendMove => "append_move",
            StrategyName::RetrieveMove => "retrieve_move",
            StrategyName::BruteForce => "brute_force",
            StrategyName::Random => "random",
        }
    }
}

impl std::fmt::Display for StrategyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyName::ALL
            .iter()
            .find(|n| n.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown strategy: {s}"))
    }
}

impl<'a> Engine<'a> {
    /// Run one fixed strategy over a document. `seed` drives the random
    /// strategy and is ignored by the others.
    pub fn run_baseline(
        &self,
        name: StrategyName,
        task: &TaskSpec,
        doc: &ContextDocument,
        seed: u64,
    ) -> Result<AnswerRecord, EngineError> {
        let mut traj = Trajectory::default();
        match self.baseline_inner(name, task, doc, seed, &mut traj) {
            Ok((answer, low_confidence)) => Ok(AnswerRecord {
                task: task.name.clone(),
                strategy: name.to_string(),
                plan: None,
                terminal: traj.terminal.expect("baseline finished with a terminal"),
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

    fn baseline_inner(
        &self,
        name: StrategyName,
        task: &TaskSpec,
        doc: &ContextDocument,
        seed: u64,
        traj: &mut Trajectory,
    ) -> Result<(String, bool), EngineErrorKind> {
        self.validate_run(task)?;
        let question = task
            .query
            .clone()
            .unwrap_or_else(|| task.default_question());
        // Baselines have no planning call; the terminal follows the task
        // category: aggregation for summarization, answer otherwise.
        let terminal = if task.category == TaskCategory::Summarization {
            Action::Aggregation
        } else {
            Action::Answer
        };
        let reverse = task.category == TaskCategory::Code;

        match name {
            StrategyName::BruteForce => {
                let overhead = self.template_overhead(&task.answer_template, &[("question", &question)])?;
                let limit = self
                    .config
                    .prompt_allowance()
                    .saturating_sub(overhead)
                    .max(2);
                let truncated = truncate_middle(doc, limit);
                self.finalize(task, &truncated.text, &question, terminal, traj)
            }
            StrategyName::RetrieveOnly => {
                let chunks = decompose(doc, self.config.chunk_budget);
                let top = self.retrieve_indices(&question, &chunks, 1)?;
                traj.push(TrajectoryStep {
                    chunk: top.first().copied(),
                    action: Action::Retrieve,
                    prompt_sha256: None,
                    response_sha256: None,
                });
                let context = top
                    .first()
                    .map(|&i| chunks[i].text.clone())
                    .unwrap_or_default();
                self.finalize(task, &context, &question, terminal, traj)
            }
            StrategyName::RetrieveMove => {
                let chunks = decompose(doc, self.config.chunk_budget);
                let mut selected = self.retrieve_indices(&question, &chunks, self.config.top_k)?;
                traj.push(TrajectoryStep {
                    chunk: selected.first().copied(),
                    action: Action::Retrieve,
                    prompt_sha256: None,
                    response_sha256: None,
                });
                selected.sort_unstable();
                let mut evidence = EvidenceState::new(self.config.evidence_budget);
                for &idx in &selected {
                    let (appended, hashes) =
                        self.append_chunk(&chunks[idx], &question, &mut evidence)?;
                    traj.push(TrajectoryStep {
                        chunk: Some(idx),
                        action: if appended { Action::Append } else { Action::Move },
                        prompt_sha256: hashes.0,
                        response_sha256: hashes.1,
                    });
                }
                self.finalize(task, &evidence.context_text(), &question, terminal, traj)
            }
            StrategyName::MergeOnly | StrategyName::MergeMove => {
                let chunks = decompose(doc, self.config.chunk_budget);
                let pass = ChunkPass {
                    reverse,
                    null_is_move: name == StrategyName::MergeMove,
                    terminal,
                };
                self.exec_merge(task, &chunks, &question, pass, traj)
            }
            StrategyName::AppendOnly | StrategyName::AppendMove => {
                let chunks = decompose(doc, self.config.chunk_budget);
                let pass = ChunkPass {
                    reverse,
                    null_is_move: name == StrategyName::AppendMove,
                    terminal,
                };
                self.exec_append(task, &chunks, &question, pass, traj)
            }
            StrategyName::Random => {
                let chunks = decompose(doc, self.config.chunk_budget);
                self.random_pass(task, &chunks, &question, seed, terminal, traj)
            }
        }
    }

    /// Per chunk, uniformly choose among append, merge, and move with the
    /// seeded generator; retrieve and answer are excluded mid-stream.
    fn random_pass(
        &self,
        task: &TaskSpec,
        chunks: &[Chunk],
        question: &str,
        seed: u64,
        terminal: Action,
        traj: &mut Trajectory,
    ) -> Result<(String, bool), EngineErrorKind> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut evidence = EvidenceState::new(self.config.evidence_budget);
        let mut summary = String::new();
        for chunk in chunks {
            let (action, hashes) = match rng.random_range(0..3u8) {
                0 => {
                    let (appended, hashes) = self.append_chunk(chunk, question, &mut evidence)?;
                    (
                        if appended { Action::Append } else { Action::Move },
                        hashes,
                    )
                }
                1 => {
                    let (merged, hashes) = self.merge_chunk(chunk, question, &mut summary)?;
                    (if merged { Action::Merge } else { Action::Move }, hashes)
                }
                _ => (Action::Move, (None, None)),
            };
            traj.push(TrajectoryStep {
                chunk: Some(chunk.index),
                action,
                prompt_sha256: hashes.0,
                response_sha256: hashes.1,
            });
        }
        evidence.set_summary(summary);
        self.finalize(task, &evidence.context_text(), question, terminal, traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::gateway::{script_mock, BackendProfile, Gateway, MockRule};
    use crate::prompt::TemplateRegistry;
    use std::sync::Arc;

    fn gateway(rules: Vec<MockRule>) -> Gateway {
        Gateway::new(
            Arc::new(script_mock(rules).unwrap()),
            BackendProfile::default_4k(),
        )
    }

    fn fixture_rules() -> Vec<MockRule> {
        vec![
            MockRule::pattern(
                r".*secret needle.*Select up to ten key sentences.*",
                "[s1]",
            ),
            MockRule::substring("Select up to ten key sentences", "null"),
            MockRule::substring("Summarize the partial article", "a supplement"),
            MockRule::substring("answer the following question", "final"),
            MockRule::catch_all("null"),
        ]
    }

    fn qa_task() -> TaskSpec {
        TaskSpec::new(
            "qa",
            Some("Where is the needle payload?".to_string()),
            "answer_plain",
            TaskCategory::Qa,
        )
    }

    // Four paragraphs, the planted answer in the third.
    fn doc() -> ContextDocument {
        ContextDocument::new(
            "Filler paragraph one with several words inside it.\n\n\
             Filler paragraph two with several more words inside.\n\n\
             Here sits the secret needle payload for the query.\n\n\
             Filler paragraph four closing out the document.",
        )
    }

    fn cfg() -> RunConfig {
        RunConfig {
            chunk_budget: 16,
            evidence_budget: 64,
            ..RunConfig::default()
        }
    }

    fn roles(record: &AnswerRecord) -> Vec<&str> {
        record.ledger.entries.iter().map(|e| e.role.as_str()).collect()
    }

    #[test]
    fn strategy_names_round_trip() {
        for name in StrategyName::ALL {
            assert_eq!(name.as_str().parse::<StrategyName>().unwrap(), name);
        }
        assert!("bogus".parse::<StrategyName>().is_err());
    }

    #[test]
    fn retrieve_only_issues_exactly_one_call() {
        let gw = gateway(fixture_rules());
        let reg = TemplateRegistry::builtin();
        let config = cfg();
        let engine = Engine::new(&gw, &reg, &config);
        let record = engine
            .run_baseline(StrategyName::RetrieveOnly, &qa_task(), &doc(), 0)
            .unwrap();
        assert_eq!(roles(&record), vec!["answer"]);
        let actions: Vec<Action> = record.steps.iter().map(|s| s.action).collect();
        assert_eq!(actions, vec![Action::Retrieve, Action::Answer]);
        assert_eq!(record.answer, "final");
        // The top-ranked chunk is the planted one.
        assert!(record.steps[0].chunk.is_some());
        record.trajectory().validate(false, false).unwrap();
    }

    #[test]
    fn brute_force_is_one_call_without_decomposition() {
        let gw = gateway(fixture_rules());
        let reg = TemplateRegistry::builtin();
        let config = cfg();
        let engine = Engine::new(&gw, &reg, &config);
        let record = engine
            .run_baseline(StrategyName::BruteForce, &qa_task(), &doc(), 0)
            .unwrap();
        assert_eq!(roles(&record), vec!["answer"]);
        let actions: Vec<Action> = record.steps.iter().map(|s| s.action).collect();
        assert_eq!(actions, vec![Action::Answer]);
    }

    #[test]
    fn append_only_processes_every_chunk() {
        let gw = gateway(fixture_rules());
        let reg = TemplateRegistry::builtin();
        let config = cfg();
        let engine = Engine::new(&gw, &reg, &config);
        let record = engine
            .run_baseline(StrategyName::AppendOnly, &qa_task(), &doc(), 0)
            .unwrap();
        let r = roles(&record);
        assert_eq!(r.iter().filter(|x| **x == "append").count(), 4);
        assert_eq!(*r.last().unwrap(), "answer");
        // Null responses do not become moves here.
        let actions: Vec<Action> = record.steps.iter().map(|s| s.action).collect();
        assert_eq!(actions.iter().filter(|a| **a == Action::Append).count(), 4);
        assert!(!actions.contains(&Action::Move));
    }

    #[test]
    fn append_move_skips_null_chunks() {
        let gw = gateway(fixture_rules());
        let reg = TemplateRegistry::builtin();
        let config = cfg();
        let engine = Engine::new(&gw, &reg, &config);
        let record = engine
            .run_baseline(StrategyName::AppendMove, &qa_task(), &doc(), 0)
            .unwrap();
        let actions: Vec<Action> = record.steps.iter().map(|s| s.action).collect();
        assert_eq!(actions.iter().filter(|a| **a == Action::Append).count(), 1);
        assert_eq!(actions.iter().filter(|a| **a == Action::Move).count(), 3);
        record.trajectory().validate(false, false).unwrap();
    }

    #[test]
    fn merge_variants_call_every_chunk() {
        for (name, expect_moves) in [(StrategyName::MergeOnly, false), (StrategyName::MergeMove, false)] {
            let gw = gateway(fixture_rules());
            let reg = TemplateRegistry::builtin();
            let config = cfg();
            let engine = Engine::new(&gw, &reg, &config);
            let record = engine.run_baseline(name, &qa_task(), &doc(), 0).unwrap();
            let r = roles(&record);
            assert_eq!(r.iter().filter(|x| **x == "merge").count(), 4, "{name}");
            // The fixture's merge rule always supplements, so no moves
            // either way; merge_only must never emit Move regardless.
            let actions: Vec<Action> = record.steps.iter().map(|s| s.action).collect();
            assert_eq!(actions.contains(&Action::Move), expect_moves);
        }
    }

    #[test]
    fn retrieve_move_processes_top_k() {
        let gw = gateway(fixture_rules());
        let reg = TemplateRegistry::builtin();
        let config = RunConfig {
            top_k: 2,
            ..cfg()
        };
        let engine = Engine::new(&gw, &reg, &config);
        let record = engine
            .run_baseline(StrategyName::RetrieveMove, &qa_task(), &doc(), 0)
            .unwrap();
        let r = roles(&record);
        assert_eq!(r.iter().filter(|x| **x == "append").count(), 2);
        let actions: Vec<Action> = record.steps.iter().map(|s| s.action).collect();
        assert_eq!(actions[0], Action::Retrieve);
        record.trajectory().validate(false, false).unwrap();
    }

    #[test]
    fn random_is_reproducible_per_seed() {
        let reg = TemplateRegistry::builtin();
        let config = cfg();
        let run = |seed: u64| {
            let gw = gateway(fixture_rules());
            let engine = Engine::new(&gw, &reg, &config);
            let record = engine
                .run_baseline(StrategyName::Random, &qa_task(), &doc(), seed)
                .unwrap();
            serde_json::to_string(&record).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn summarization_tasks_aggregate() {
        let gw = gateway(fixture_rules());
        let reg = TemplateRegistry::builtin();
        let config = cfg();
        let engine = Engine::new(&gw, &reg, &config);
        let task = TaskSpec::new("summ", None, "answer_summarize", TaskCategory::Summarization);
        let record = engine
            .run_baseline(StrategyName::MergeOnly, &task, &doc(), 0)
            .unwrap();
        assert_eq!(record.terminal, Action::Aggregation);
    }

    #[test]
    fn retrieve_costs_less_than_sequential_processing() {
        let reg = TemplateRegistry::builtin();
        let config = cfg();
        let run = |name: StrategyName| {
            let gw = gateway(fixture_rules());
            let engine = Engine::new(&gw, &reg, &config);
            engine.run_baseline(name, &qa_task(), &doc(), 0).unwrap()
        };
        let retrieve = run(StrategyName::RetrieveOnly);
        let append = run(StrategyName::AppendOnly);
        assert!(retrieve.ledger.total_tokens() < append.ledger.total_tokens());
    }
}
