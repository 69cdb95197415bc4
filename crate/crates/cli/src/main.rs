//! Command-line surface: run suites, ablate strategies, re-score prediction
//! files, emit energy-model sweeps, and inspect the replay store.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lcboost::baseline::StrategyName;
use lcboost::config::{BackendSelection, RunConfig, StrategyChoice};
use lcboost::cost::{energy_sweep, HardwareProfile, ModelShape};
use lcboost::gateway::{RecordBackend, RemoteConfig, ReplayStore};
use lcboost::harness::{
    aggregate_csv, build_backend, examples_csv, ingest, read_predictions, score_predictions,
    DatasetManifest, Harness, IngestMode, SuiteOutcome,
};
use lcboost::prompt::TemplateRegistry;

#[derive(Parser)]
#[command(
    name = "lcboost",
    version,
    about = "Solve long-context tasks with a short working window"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a strategy over a JSONL dataset and print the report JSON.
    Run(RunArgs),
    /// Run several strategies over the same dataset and print a comparison table.
    Ablate(AblateArgs),
    /// Re-score a predictions file against gold records, emitting CSV.
    Score(ScoreArgs),
    /// Emit the brute-force vs chunked energy sweep as CSV.
    EnergyReport(EnergyArgs),
    /// Inspect or compact a replay store.
    Cache(CacheArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// Backend kind: mock, replay, record, or remote. Defaults to the
    /// config file's backend, else mock.
    #[arg(long)]
    backend: Option<String>,
    /// Replay store path (replay backend).
    #[arg(long)]
    store: Option<PathBuf>,
    /// JSON rules file for the mock backend.
    #[arg(long)]
    mock_rules: Option<PathBuf>,
    /// Base URL for the remote backend.
    #[arg(long)]
    base_url: Option<String>,
    /// Model name for the remote backend.
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    /// Record every call of the selected backend into this store.
    #[arg(long)]
    record_store: Option<PathBuf>,
}

impl BackendArgs {
    /// Backend chosen by flags, or `None` when no backend flag was given
    /// (the config file's selection then stands).
    fn selection(&self) -> Result<Option<BackendSelection>> {
        let flagged = self.backend.is_some()
            || self.store.is_some()
            || self.mock_rules.is_some()
            || self.base_url.is_some()
            || self.model.is_some();
        if !flagged {
            return Ok(None);
        }
        let remote = || {
            let mut r = RemoteConfig::default();
            if let Some(u) = &self.base_url {
                r.base_url = u.clone();
            }
            if let Some(m) = &self.model {
                r.model = m.clone();
            }
            if let Some(e) = &self.api_key_env {
                r.api_key_env = e.clone();
            }
            r
        };
        match self.backend.as_deref().unwrap_or("mock") {
            "mock" => Ok(Some(BackendSelection::Mock {
                rules: self.mock_rules.clone(),
            })),
            "replay" => {
                let store = self
                    .store
                    .clone()
                    .context("--backend replay requires --store")?;
                Ok(Some(BackendSelection::Replay { store }))
            }
            "remote" => Ok(Some(BackendSelection::Remote { remote: remote() })),
            "record" => {
                let store = self
                    .store
                    .clone()
                    .context("--backend record requires --store")?;
                Ok(Some(BackendSelection::Record {
                    store,
                    remote: remote(),
                }))
            }
            other => bail!("unknown backend {other} (expected mock, replay, record, or remote)"),
        }
    }
}

#[derive(Args)]
struct SuiteArgs {
    /// JSONL dataset file.
    #[arg(long)]
    data: PathBuf,
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest overriding the built-in metric/category table.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory of prompt templates overriding the built-ins.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    chunk_budget: Option<usize>,
    #[arg(long)]
    evidence_budget: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Skip malformed dataset lines instead of aborting.
    #[arg(long)]
    lenient: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

impl SuiteArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(selection) = self.backend.selection()? {
            config.backend = selection;
        }
        if let Some(v) = self.window {
            config.window = v;
        }
        if let Some(v) = self.chunk_budget {
            config.chunk_budget = v;
        }
        if let Some(v) = self.evidence_budget {
            config.evidence_budget = v;
        }
        if let Some(v) = self.top_k {
            config.top_k = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.concurrency {
            config.concurrency = v;
        }
        config.strict_ingest = !self.lenient;
        Ok(config)
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        match &self.manifest {
            Some(path) => Ok(DatasetManifest::from_file(path)?),
            None => Ok(DatasetManifest::builtin()),
        }
    }

    fn registry(&self) -> Result<TemplateRegistry> {
        match &self.templates {
            Some(dir) => Ok(TemplateRegistry::from_dir(dir)?),
            None => Ok(TemplateRegistry::builtin()),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Strategy: lcboost or a baseline name.
    #[arg(long, default_value = "lcboost")]
    strategy: String,
    /// Write per-example trace JSON files into this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Write the report JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Comma-separated strategies; defaults to lcboost plus all baselines.
    #[arg(long)]
    strategies: Option<String>,
    /// Also write the comparison table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Predictions JSONL: {id, prediction[, dataset, references]}.
    #[arg(long)]
    predictions: PathBuf,
    /// Gold records JSONL (joined by id when references are not inline).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for per_example.csv and aggregate.csv (default: stdout).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct EnergyArgs {
    /// Sweep start in tokens.
    #[arg(long, default_value_t = 4096)]
    start: u64,
    /// Sweep end in tokens.
    #[arg(long, default_value_t = 131_072)]
    end: u64,
    /// Sweep step in tokens.
    #[arg(long, default_value_t = 4096)]
    step: u64,
    /// Working window for the chunked scenario.
    #[arg(long, default_value_t = 4096)]
    window: u64,
    /// Extra prompt tokens charged per chunk call.
    #[arg(long, default_value_t = 0)]
    overhead: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CacheArgs {
    #[command(subcommand)]
    action: CacheAction,
}

#[derive(Subcommand)]
enum CacheAction {
    /// Verify the store and print entry statistics.
    Inspect {
        #[arg(long)]
        store: PathBuf,
    },
    /// Drop duplicate records and rewrite the store.
    Compact {
        #[arg(long)]
        store: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Score(args) => cmd_score(args),
        Command::EnergyReport(args) => cmd_energy(args),
        Command::Cache(args) => cmd_cache(args),
    }
}

fn run_suite_with(args: &SuiteArgs, strategy: StrategyChoice) -> Result<SuiteOutcome> {
    let mut config = args.config()?;
    config.strategy = strategy;
    let manifest = args.manifest()?;
    let registry = args.registry()?;
    let mode = if config.strict_ingest {
        IngestMode::Strict
    } else {
        IngestMode::Lenient
    };
    let ingested = ingest(&args.data, &manifest, mode)?;
    for (line, message) in &ingested.skipped {
        eprintln!("warning: skipped line {line}: {message}");
    }
    let mut harness = Harness::new(config, registry)?;
    if let Some(store) = &args.backend.record_store {
        let backend = build_backend(&harness.config().backend)?;
        let recorder = RecordBackend::new(backend, store)?;
        harness = harness.with_backend(Arc::new(recorder));
    }
    Ok(harness.run_suite(&ingested.records, &manifest))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let strategy: StrategyChoice = args
        .strategy
        .parse()
        .map_err(|e: String| anyhow::anyhow!(e))?;
    let outcome = run_suite_with(&args.suite, strategy)?;

    if let Some(dir) = &args.trace_dir {
        std::fs::create_dir_all(dir)?;
        for (example, trace) in outcome.report.examples.iter().zip(&outcome.traces) {
            if let Some(record) = trace {
                let path = dir.join(format!("{}.json", sanitize(&example.id)));
                std::fs::write(&path, serde_json::to_string_pretty(record)?)?;
            }
        }
    }

    let json = serde_json::to_string_pretty(&outcome.report)?;
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    eprintln!(
        "ran {} examples in {:.2}s ({} prompt + {} response tokens)",
        outcome.report.examples.len(),
        outcome.report.wall_time_secs,
        outcome.report.total_prompt_tokens,
        outcome.report.total_response_tokens,
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let strategies: Vec<StrategyChoice> = match &args.strategies {
        Some(spec) => spec
            .split(',')
            .map(|s| s.trim().parse::<StrategyChoice>())
            .collect::<Result<_, String>>()
            .map_err(|e| anyhow::anyhow!(e))?,
        None => {
            let mut all = vec![StrategyChoice::LcBoost];
            all.extend(StrategyName::ALL.map(StrategyChoice::Baseline));
            all
        }
    };

    let mut datasets: Vec<String> = Vec::new();
    let mut rows: Vec<(String, BTreeMap<String, f64>, usize)> = Vec::new();
    for strategy in strategies {
        let outcome = run_suite_with(&args.suite, strategy)?;
        for name in outcome.report.aggregates.keys() {
            if !datasets.contains(name) {
                datasets.push(name.clone());
            }
        }
        rows.push((
            strategy.to_string(),
            outcome.report.aggregates.clone(),
            outcome.report.total_prompt_tokens + outcome.report.total_response_tokens,
        ));
    }
    datasets.sort();

    let mut header = vec!["strategy".to_string()];
    header.extend(datasets.iter().cloned());
    header.push("total_tokens".to_string());
    let mut table: Vec<Vec<String>> = vec![header];
    for (name, aggregates, tokens) in &rows {
        let mut row = vec![name.clone()];
        for d in &datasets {
            row.push(
                aggregates
                    .get(d)
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".to_string()),
            );
        }
        row.push(tokens.to_string());
        table.push(row);
    }
    print_table(&table);

    if let Some(path) = &args.csv {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &table {
            writer.write_record(row)?;
        }
        writer.flush()?;
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let manifest = match &args.manifest {
        Some(path) => DatasetManifest::from_file(path)?,
        None => DatasetManifest::builtin(),
    };
    let mode = if args.lenient {
        IngestMode::Lenient
    } else {
        IngestMode::Strict
    };
    let records = ingest(&args.data, &manifest, mode)?.records;
    let predictions = read_predictions(&args.predictions)?;
    let (examples, aggregates) = score_predictions(&predictions, &records, &manifest)?;
    let per_example = examples_csv(&examples, &manifest)?;
    let aggregate = aggregate_csv(&aggregates, &manifest)?;
    match &args.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("per_example.csv"), per_example)?;
            std::fs::write(dir.join("aggregate.csv"), aggregate)?;
            eprintln!("wrote {}/per_example.csv and aggregate.csv", dir.display());
        }
        None => {
            print!("{per_example}");
            print!("{aggregate}");
        }
    }
    Ok(())
}

fn cmd_energy(args: EnergyArgs) -> Result<()> {
    let rows = energy_sweep(
        args.start,
        args.end,
        args.step,
        args.window,
        args.overhead,
        &ModelShape::llama_7b(),
        &HardwareProfile::default(),
    );
    let mut writer: csv::Writer<Vec<u8>> = csv::Writer::from_writer(Vec::new());
    writer.write_record(["doc_len", "scenario", "flops", "joules", "prompt_tokens"])?;
    for row in &rows {
        writer.write_record([
            row.doc_len.to_string(),
            row.scenario.clone(),
            format!("{:.6e}", row.flops),
            format!("{:.6}", row.joules),
            row.prompt_tokens.to_string(),
        ])?;
    }
    let text = String::from_utf8(writer.into_inner()?)?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_cache(args: CacheArgs) -> Result<()> {
    match args.action {
        CacheAction::Inspect { store } => {
            let records = ReplayStore::load(&store)?;
            let total_prompt_bytes: usize =
                records.values().map(|r| r.request.prompt.len()).sum();
            println!(
                "store {}: {} records, {} prompt bytes, hashes verified",
                store.display(),
                records.len(),
                total_prompt_bytes,
            );
        }
        CacheAction::Compact { store } => {
            let (kept, dropped) = ReplayStore::compact(&store)?;
            println!(
                "store {}: kept {kept} records, dropped {dropped} duplicates",
                store.display()
            );
        }
    }
    Ok(())
}

fn print_table(rows: &[Vec<String>]) {
    if rows.is_empty() {
        return;
    }
    let cols = rows[0].len();
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{cell:<width$}", width = widths[i]))
            .collect();
        println!("{}", line.join("  "));
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
