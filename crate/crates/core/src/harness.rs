//! Dataset ingestion, suite orchestration over many examples, scoring, and
//! report assembly.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BackendSelection, RunConfig, StrategyChoice};
use crate::engine::{AnswerRecord, Engine, TaskCategory, TaskSpec};
use crate::gateway::{
    script_mock, Backend, BackendProfile, Gateway, MockRule, RecordBackend, RemoteBackend,
    ReplayBackend,
};
use crate::metrics::Metric;
use crate::prompt::TemplateRegistry;
use crate::segment::ContextDocument;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unknown dataset {0} (no manifest entry and strict mode is on)")]
    UnknownDataset(String),
    #[error("backend setup failed: {0}")]
    Backend(String),
    #[error("{0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Records and the dataset manifest
// ---------------------------------------------------------------------------

/// One benchmark example, newline-delimited JSON on disk. Unknown fields
/// are preserved in `extra`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(alias = "_id", default)]
    pub id: String,
    pub dataset: String,
    #[serde(alias = "input", default)]
    pub query: Option<String>,
    pub context: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub length: Option<u64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl DatasetRecord {
    fn validate(&self) -> Result<(), String> {
        if self.context.is_empty() {
            return Err("context must be non-empty".to_string());
        }
        if self.answers.is_empty() {
            return Err("answers must be non-empty".to_string());
        }
        Ok(())
    }

    /// Queries are meaningful only when non-empty.
    pub fn effective_query(&self) -> Option<String> {
        self.query
            .as_deref()
            .map(str::trim)
            .filter(|q| !q.is_empty())
            .map(str::to_string)
    }
}

/// Per-dataset scoring and execution policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub metric: Metric,
    pub category: TaskCategory,
    pub answer_template: String,
}

/// Maps dataset names to their metric, category, and answer template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub datasets: BTreeMap<String, DatasetEntry>,
}

impl DatasetManifest {
    /// Defaults for the twelve benchmark datasets.
    pub fn builtin() -> Self {
        let mut datasets = BTreeMap::new();
        let mut add = |name: &str, metric: Metric, category: TaskCategory, template: &str| {
            datasets.insert(
                name.to_string(),
                DatasetEntry {
                    metric,
                    category,
                    answer_template: template.to_string(),
                },
            );
        };
        add("narrativeqa", Metric::QaF1, TaskCategory::Qa, "answer_plain");
        add("qasper", Metric::QaF1, TaskCategory::Qa, "answer_plain");
        add("multifieldqa_en", Metric::QaF1, TaskCategory::Qa, "answer_plain");
        add("hotpotqa", Metric::QaF1, TaskCategory::Qa, "answer_plain");
        add("2wikimqa", Metric::QaF1, TaskCategory::Qa, "answer_plain");
        add("musique", Metric::QaF1, TaskCategory::Qa, "answer_plain");
        add(
            "gov_report",
            Metric::RougeL,
            TaskCategory::Summarization,
            "answer_summarize",
        );
        add(
            "multi_news",
            Metric::RougeL,
            TaskCategory::Summarization,
            "answer_summarize",
        );
        add("samsum", Metric::RougeL, TaskCategory::Fewshot, "answer_plain");
        add(
            "passage_count",
            Metric::Accuracy,
            TaskCategory::Synthetic,
            "answer_plain",
        );
        add("lcc", Metric::EditSim, TaskCategory::Code, "answer_code");
        add(
            "self_constructed",
            Metric::Accuracy,
            TaskCategory::Synthetic,
            "answer_plain",
        );
        Self { datasets }
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let raw = std::fs::read_to_string(path)?;
        let mut manifest = Self::builtin();
        let overrides: DatasetManifest = serde_json::from_str(&raw)
            .map_err(|e| HarnessError::Config(format!("manifest {}: {e}", path.display())))?;
        manifest.datasets.extend(overrides.datasets);
        Ok(manifest)
    }

    pub fn resolve(&self, dataset: &str) -> Option<&DatasetEntry> {
        self.datasets.get(dataset)
    }

    pub fn task_spec(&self, record: &DatasetRecord) -> Option<TaskSpec> {
        let entry = self.resolve(&record.dataset)?;
        Some(TaskSpec::new(
            record.dataset.clone(),
            record.effective_query(),
            entry.answer_template.clone(),
            entry.category,
        ))
    }
}

/// How ingestion treats malformed lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestMode {
    Strict,
    Lenient,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub records: Vec<DatasetRecord>,
    /// (line number, message) pairs skipped in lenient mode.
    pub skipped: Vec<(usize, String)>,
}

/// Read newline-delimited JSON records. Strict mode aborts on the first
/// malformed line with its line number; lenient mode skips and reports.
pub fn ingest(
    path: &Path,
    manifest: &DatasetManifest,
    mode: IngestMode,
) -> Result<IngestReport, HarnessError> {
    let file = std::fs::File::open(path)?;
    let mut report = IngestReport::default();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<DatasetRecord, String> = serde_json::from_str::<DatasetRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r))
            .and_then(|r| {
                if manifest.resolve(&r.dataset).is_none() {
                    Err(format!("unknown dataset {}", r.dataset))
                } else {
                    Ok(r)
                }
            });
        match parsed {
            Ok(mut record) => {
                if record.id.is_empty() {
                    record.id = format!("line{lineno}");
                }
                report.records.push(record);
            }
            Err(message) => match mode {
                IngestMode::Strict => {
                    return Err(HarnessError::Malformed {
                        line: lineno,
                        message,
                    })
                }
                IngestMode::Lenient => report.skipped.push((lineno, message)),
            },
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Suite execution
// ---------------------------------------------------------------------------

/// Outcome for one record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleReport {
    pub id: String,
    pub dataset: String,
    pub answer: Option<String>,
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Aggregated suite outcome. Serializes deterministically; wall time is
/// reported separately so replayed suites hash identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub examples: Vec<ExampleReport>,
    /// Mean score per dataset over scored examples.
    pub aggregates: BTreeMap<String, f64>,
    /// True when no example produced a score.
    pub aggregate_undefined: bool,
    pub total_prompt_tokens: usize,
    pub total_response_tokens: usize,
    /// Local totals scaled by the token calibration factor.
    pub calibrated_total_tokens: f64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// A suite run's report plus the full per-record traces.
#[derive(Debug)]
pub struct SuiteOutcome {
    pub report: RunReport,
    pub traces: Vec<Option<AnswerRecord>>,
}

/// Build the backend selected by the config.
pub fn build_backend(selection: &BackendSelection) -> Result<Arc<dyn Backend>, HarnessError> {
    match selection {
        BackendSelection::Mock { rules } => {
            let rules = match rules {
                Some(path) => {
                    let raw = std::fs::read_to_string(path)?;
                    serde_json::from_str::<Vec<MockRule>>(&raw)
                        .map_err(|e| HarnessError::Backend(format!("mock rules: {e}")))?
                }
                None => vec![MockRule::catch_all("null")],
            };
            Ok(Arc::new(script_mock(rules).map_err(|e| {
                HarnessError::Backend(e.to_string())
            })?))
        }
        BackendSelection::Replay { store } => Ok(Arc::new(
            ReplayBackend::open(store).map_err(|e| HarnessError::Backend(e.to_string()))?,
        )),
        BackendSelection::Record { store, remote } => {
            let inner = Arc::new(RemoteBackend::new(remote.clone()));
            Ok(Arc::new(RecordBackend::new(inner, store).map_err(|e| {
                HarnessError::Backend(e.to_string())
            })?))
        }
        BackendSelection::Remote { remote } => Ok(Arc::new(RemoteBackend::new(remote.clone()))),
    }
}

/// Runs suites: owns the shared backend, the template registry, and the
/// run configuration. Each record gets its own gateway so its ledger covers
/// exactly one run.
pub struct Harness {
    backend: Arc<dyn Backend>,
    registry: Arc<TemplateRegistry>,
    config: RunConfig,
    profile: BackendProfile,
}

impl Harness {
    pub fn new(config: RunConfig, registry: TemplateRegistry) -> Result<Self, HarnessError> {
        config
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let backend = build_backend(&config.backend)?;
        let profile = BackendProfile {
            context_limit: config.window,
            max_output_tokens: config.max_output_tokens,
            ..BackendProfile::default_4k()
        };
        Ok(Self {
            backend,
            registry: Arc::new(registry),
            config,
            profile,
        })
    }

    pub fn with_backend(mut self, backend: Arc<dyn Backend>) -> Self {
        self.backend = backend;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn run_one_with_trace(
        &self,
        record: &DatasetRecord,
        manifest: &DatasetManifest,
    ) -> (ExampleReport, Option<AnswerRecord>) {
        let Some(entry) = manifest.resolve(&record.dataset) else {
            return (
                ExampleReport {
                    id: record.id.clone(),
                    dataset: record.dataset.clone(),
                    answer: None,
                    score: None,
                    error: Some(format!("unknown dataset {}", record.dataset)),
                },
                None,
            );
        };
        let task = manifest.task_spec(record).expect("entry resolved");
        let doc = ContextDocument::new(record.context.clone());
        let gateway = Gateway::new(self.backend.clone(), self.profile.clone());
        let engine = Engine::new(&gateway, &self.registry, &self.config);
        let result = match self.config.strategy {
            StrategyChoice::LcBoost => engine.run(&task, &doc),
            StrategyChoice::Baseline(name) => {
                engine.run_baseline(name, &task, &doc, self.config.seed)
            }
        };
        match result {
            Ok(answer_record) => {
                let score = entry.metric.score(&answer_record.answer, &record.answers);
                let example = ExampleReport {
                    id: record.id.clone(),
                    dataset: record.dataset.clone(),
                    answer: Some(answer_record.answer.clone()),
                    score: Some(score),
                    error: None,
                };
                (example, Some(answer_record))
            }
            Err(e) => (
                ExampleReport {
                    id: record.id.clone(),
                    dataset: record.dataset.clone(),
                    answer: None,
                    score: None,
                    error: Some(e.to_string()),
                },
                None,
            ),
        }
    }

    /// Execute the configured strategy over every record with bounded
    /// concurrency. Results are ordered by record position regardless of
    /// worker count; partial failures are recorded, not fatal.
    pub fn run_suite(
        &self,
        records: &[DatasetRecord],
        manifest: &DatasetManifest,
    ) -> SuiteOutcome {
        let started = Instant::now();
        let width = self.config.concurrency.max(1).min(records.len().max(1));
        let mut results: Vec<Option<(ExampleReport, Option<AnswerRecord>)>> =
            Vec::with_capacity(records.len());
        results.resize_with(records.len(), || None);
        let results = Mutex::new(results);
        let next = AtomicUsize::new(0);

        std::thread::scope(|scope| {
            for _ in 0..width {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= records.len() {
                        break;
                    }
                    let outcome = self.run_one_with_trace(&records[i], manifest);
                    results.lock().expect("results poisoned")[i] = Some(outcome);
                });
            }
        });

        let collected = results.into_inner().expect("results poisoned");
        let mut examples = Vec::with_capacity(records.len());
        let mut traces = Vec::with_capacity(records.len());
        let mut per_dataset: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut total_prompt = 0usize;
        let mut total_response = 0usize;
        for slot in collected {
            let (example, trace) = slot.expect("worker filled every slot");
            if let Some(score) = example.score {
                let entry = per_dataset.entry(example.dataset.clone()).or_insert((0.0, 0));
                entry.0 += score;
                entry.1 += 1;
            }
            if let Some(t) = &trace {
                total_prompt += t.ledger.total_prompt_tokens;
                total_response += t.ledger.total_response_tokens;
            }
            examples.push(example);
            traces.push(trace);
        }
        let aggregates: BTreeMap<String, f64> = per_dataset
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect();
        let aggregate_undefined = aggregates.is_empty();
        let report = RunReport {
            strategy: self.config.strategy.to_string(),
            examples,
            aggregates,
            aggregate_undefined,
            total_prompt_tokens: total_prompt,
            total_response_tokens: total_response,
            calibrated_total_tokens: (total_prompt + total_response) as f64
                * self.config.token_calibration,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        SuiteOutcome { report, traces }
    }
}

// ---------------------------------------------------------------------------
// Re-scoring predictions
// ---------------------------------------------------------------------------

/// One line of a predictions file. References may be inline or joined from
/// the dataset records by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(default)]
    pub dataset: Option<String>,
    pub prediction: String,
    #[serde(default)]
    pub references: Option<Vec<String>>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, HarnessError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).map_err(|e| HarnessError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

/// Score predictions against the gold records, producing per-example rows
/// and per-dataset means.
pub fn score_predictions(
    predictions: &[Prediction],
    records: &[DatasetRecord],
    manifest: &DatasetManifest,
) -> Result<(Vec<ExampleReport>, BTreeMap<String, f64>), HarnessError> {
    let by_id: BTreeMap<&str, &DatasetRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut examples = Vec::new();
    let mut per_dataset: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for p in predictions {
        let (dataset, references) = match (&p.dataset, &p.references) {
            (Some(d), Some(r)) => (d.clone(), r.clone()),
            _ => {
                let record = by_id.get(p.id.as_str()).ok_or_else(|| {
                    HarnessError::Config(format!("prediction {} has no matching record", p.id))
                })?;
                (record.dataset.clone(), record.answers.clone())
            }
        };
        let entry = manifest
            .resolve(&dataset)
            .ok_or_else(|| HarnessError::UnknownDataset(dataset.clone()))?;
        let score = entry.metric.score(&p.prediction, &references);
        let agg = per_dataset.entry(dataset.clone()).or_insert((0.0, 0));
        agg.0 += score;
        agg.1 += 1;
        examples.push(ExampleReport {
            id: p.id.clone(),
            dataset,
            answer: Some(p.prediction.clone()),
            score: Some(score),
            error: None,
        });
    }
    let aggregates = per_dataset
        .into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect();
    Ok((examples, aggregates))
}

/// Per-example scores as CSV.
pub fn examples_csv(
    examples: &[ExampleReport],
    manifest: &DatasetManifest,
) -> Result<String, HarnessError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["id", "dataset", "metric", "score", "error"])
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    for e in examples {
        let metric = manifest
            .resolve(&e.dataset)
            .map(|entry| entry.metric.name())
            .unwrap_or("unknown");
        writer
            .write_record([
                e.id.as_str(),
                e.dataset.as_str(),
                metric,
                &e.score.map(|s| format!("{s:.6}")).unwrap_or_default(),
                e.error.as_deref().unwrap_or(""),
            ])
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    String::from_utf8(writer.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?)
        .map_err(|e| HarnessError::Config(e.to_string()))
}

/// Per-dataset aggregate scores as CSV.
pub fn aggregate_csv(
    aggregates: &BTreeMap<String, f64>,
    manifest: &DatasetManifest,
) -> Result<String, HarnessError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["dataset", "metric", "mean_score"])
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    for (dataset, mean) in aggregates {
        let metric = manifest
            .resolve(dataset)
            .map(|entry| entry.metric.name())
            .unwrap_or("unknown");
        writer
            .write_record([dataset.as_str(), metric, &format!("{mean:.6}")])
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    String::from_utf8(writer.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?)
        .map_err(|e| HarnessError::Config(e.to_string()))
}
