//! End-to-end tests of the `lcboost` binary.

use std::path::Path;
use std::process::{Command, Output};

fn lcboost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcboost"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn write_fixture_data(dir: &Path) -> (String, String) {
    let data = dir.join("data.jsonl");
    let mut lines = Vec::new();
    for i in 0..3 {
        lines.push(format!(
            r#"{{"_id":"r{i}","dataset":"multifieldqa_en","input":"What is the code?","context":"Filler paragraph number {i} with a few words.\n\nThe code is 9 in this paragraph.\n\nClosing filler paragraph here.","answers":["9"]}}"#
        ));
    }
    std::fs::write(&data, lines.join("\n")).unwrap();

    let rules = dir.join("rules.json");
    std::fs::write(
        &rules,
        r#"[
  {"matcher": {"type": "substring", "value": "select one of the options"}, "template": "4"},
  {"matcher": {"type": "substring", "value": "code is 9"}, "template": "9"},
  {"matcher": {"type": "any"}, "template": "null"}
]"#,
    )
    .unwrap();
    (
        data.to_string_lossy().to_string(),
        rules.to_string_lossy().to_string(),
    )
}

#[test]
fn run_reports_json_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let (data, rules) = write_fixture_data(dir.path());
    let out = lcboost(&[
        "run",
        "--data",
        &data,
        "--strategy",
        "lcboost",
        "--backend",
        "mock",
        "--mock-rules",
        &rules,
        "--chunk-budget",
        "32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["strategy"], "lcboost");
    assert_eq!(report["aggregates"]["multifieldqa_en"], 1.0);
    assert_eq!(report["examples"].as_array().unwrap().len(), 3);
}

#[test]
fn unknown_flag_exits_2() {
    let out = lcboost(&["run", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_fails_with_diagnostic() {
    let out = lcboost(&["run", "--data", "/nonexistent/file.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn ablate_prints_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let (data, rules) = write_fixture_data(dir.path());
    let csv_path = dir.path().join("ablate.csv");
    let out = lcboost(&[
        "ablate",
        "--data",
        &data,
        "--strategies",
        "retrieve_only,append_only",
        "--backend",
        "mock",
        "--mock-rules",
        &rules,
        "--chunk-budget",
        "32",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("retrieve_only"));
    assert!(text.contains("append_only"));
    assert!(text.contains("multifieldqa_en"));
    let csv_text = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv_text.lines().count(), 3); // header + two strategies
}

#[test]
fn record_then_replay_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (data, rules) = write_fixture_data(dir.path());
    let store = dir.path().join("store.ndjson");

    let recorded = lcboost(&[
        "run",
        "--data",
        &data,
        "--backend",
        "mock",
        "--mock-rules",
        &rules,
        "--record-store",
        store.to_str().unwrap(),
        "--chunk-budget",
        "32",
    ]);
    assert!(recorded.status.success());

    let replayed = lcboost(&[
        "run",
        "--data",
        &data,
        "--backend",
        "replay",
        "--store",
        store.to_str().unwrap(),
        "--chunk-budget",
        "32",
    ]);
    assert!(
        replayed.status.success(),
        "{}",
        String::from_utf8_lossy(&replayed.stderr)
    );
    assert_eq!(stdout(&recorded), stdout(&replayed));

    // The store passes inspection and compaction.
    let inspect = lcboost(&["cache", "inspect", "--store", store.to_str().unwrap()]);
    assert!(inspect.status.success());
    assert!(stdout(&inspect).contains("hashes verified"));

    let compact = lcboost(&["cache", "compact", "--store", store.to_str().unwrap()]);
    assert!(compact.status.success());
    assert!(stdout(&compact).contains("kept"));

    // A tampered store fails inspection with a nonzero exit.
    let contents = std::fs::read_to_string(&store).unwrap();
    std::fs::write(&store, contents.replace("code is 9", "code is 8")).unwrap();
    let bad = lcboost(&["cache", "inspect", "--store", store.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("corrupt"));
}

#[test]
fn score_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_fixture_data(dir.path());
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(
        &preds,
        r#"{"id":"r0","prediction":"9"}
{"id":"r1","prediction":"wrong"}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("scores");
    let out = lcboost(&[
        "score",
        "--predictions",
        preds.to_str().unwrap(),
        "--data",
        &data,
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let per_example = std::fs::read_to_string(out_dir.join("per_example.csv")).unwrap();
    assert!(per_example.contains("r0,multifieldqa_en,qa_f1,1.000000"));
    let aggregate = std::fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert!(aggregate.contains("multifieldqa_en,qa_f1,0.500000"));
}

#[test]
fn energy_report_emits_sweep_csv() {
    let out = lcboost(&[
        "energy-report",
        "--start",
        "4096",
        "--end",
        "16384",
        "--step",
        "4096",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "doc_len,scenario,flops,joules,prompt_tokens"
    );
    // 4 lengths x 2 scenarios.
    assert_eq!(text.lines().count(), 9);
    assert!(text.contains("brute_force"));
    assert!(text.contains("chunked"));
}

#[test]
fn trace_dir_receives_per_example_records() {
    let dir = tempfile::tempdir().unwrap();
    let (data, rules) = write_fixture_data(dir.path());
    let traces = dir.path().join("traces");
    let out = lcboost(&[
        "run",
        "--data",
        &data,
        "--backend",
        "mock",
        "--mock-rules",
        &rules,
        "--chunk-budget",
        "32",
        "--trace-dir",
        traces.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(traces.join("r0.json")).unwrap()).unwrap();
    assert_eq!(trace["task"], "multifieldqa_en");
    assert_eq!(trace["terminal"], "answer");
    assert!(trace["steps"].as_array().unwrap().len() >= 2);
    assert!(!trace["ledger"]["entries"].as_array().unwrap().is_empty());
}

#[test]
fn manifest_and_template_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    // A dataset name the built-in manifest does not know.
    let data = dir.path().join("data.jsonl");
    std::fs::write(
        &data,
        r#"{"_id":"x1","dataset":"custom_set","input":"What is the code?","context":"The code is 9 in this text.","answers":["9"]}"#,
    )
    .unwrap();
    let manifest = dir.path().join("manifest.json");
    std::fs::write(
        &manifest,
        r#"{"datasets":{"custom_set":{"metric":"accuracy","category":"qa","answer_template":"custom_answer"}}}"#,
    )
    .unwrap();
    // A template directory overriding the answer prompt.
    let templates = dir.path().join("templates");
    std::fs::create_dir_all(&templates).unwrap();
    std::fs::write(
        templates.join("manifest.json"),
        r#"{"templates":[{"name":"custom_answer","file":"custom_answer.txt","required":["context","question"]}]}"#,
    )
    .unwrap();
    std::fs::write(
        templates.join("custom_answer.txt"),
        "CUSTOM PROMPT MARKER\n{context}\nQ: {question}\nA:",
    )
    .unwrap();
    let rules = dir.path().join("rules.json");
    std::fs::write(
        &rules,
        r#"[
  {"matcher": {"type": "substring", "value": "select one of the options"}, "template": "4"},
  {"matcher": {"type": "substring", "value": "CUSTOM PROMPT MARKER"}, "template": "9"},
  {"matcher": {"type": "any"}, "template": "null"}
]"#,
    )
    .unwrap();

    let out = lcboost(&[
        "run",
        "--data",
        data.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--templates",
        templates.to_str().unwrap(),
        "--backend",
        "mock",
        "--mock-rules",
        rules.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    // The scan prompt uses answer_with_null, so the custom answer template
    // only fires at the terminal; the mock answers 9 where it appears.
    assert_eq!(report["aggregates"]["custom_set"], 1.0);
}

#[test]
fn config_file_backend_survives_without_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (data, rules) = write_fixture_data(dir.path());
    let cfg = dir.path().join("config.toml");
    std::fs::write(
        &cfg,
        format!(
            "chunk_budget = 32\n\n[backend]\nkind = \"mock\"\nrules = {:?}\n",
            rules
        ),
    )
    .unwrap();
    // No --backend / --mock-rules flags: the TOML selection must be used.
    let out = lcboost(&["run", "--data", &data, "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["aggregates"]["multifieldqa_en"], 1.0);
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let (data, rules) = write_fixture_data(dir.path());
    let cfg = dir.path().join("config.toml");
    std::fs::write(
        &cfg,
        "chunk_budget = 32\nevidence_budget = 128\nconcurrency = 2\n",
    )
    .unwrap();
    let out = lcboost(&[
        "run",
        "--data",
        &data,
        "--config",
        cfg.to_str().unwrap(),
        "--backend",
        "mock",
        "--mock-rules",
        &rules,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["aggregates"]["multifieldqa_en"], 1.0);
}
