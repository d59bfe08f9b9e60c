//! Black-box tests for the `ragtree` binary: run commands, inspect output
//! files and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn ragtree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragtree"))
        .args(args)
        .env_remove("RAGTREE_BACKEND_URL")
        .env_remove("RAGTREE_MODEL")
        .env_remove("RAGTREE_API_KEY")
        .output()
        .expect("binary runs")
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn acme_args(out_dir: &Path) -> Vec<String> {
    vec![
        "--corpus".into(),
        path_arg(&fixture("corpus_acme.jsonl")),
        "--mock-script".into(),
        path_arg(&fixture("script_acme.json")),
        "--out-dir".into(),
        path_arg(out_dir),
    ]
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const ACME_QUESTION: &str = "In what year did the founder of Acme Corporation die?";

#[test]
fn test_ask_prints_answer_and_writes_golden_tree() {
    let out = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = acme_args(out.path());
    args.extend(["ask".to_string(), ACME_QUESTION.to_string()]);
    let result = ragtree(&args.iter().map(String::as_str).collect::<Vec<_>>());

    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&result.stdout), "1956\n");

    let tree_bytes = std::fs::read(out.path().join("tree.json")).unwrap();
    let golden = std::fs::read(fixture("golden_tree.json")).unwrap();
    assert_eq!(tree_bytes, golden);

    let manifest = read_json(&out.path().join("manifest.json"));
    assert_eq!(manifest["command"], "ask");
    assert_eq!(manifest["deterministic"], true);
    assert_eq!(manifest["backend"]["kind"], "mock");
    assert_eq!(manifest["retriever"], "bm25");
    assert_eq!(manifest["engine"]["tau_a"], 0.95);
}

#[test]
fn test_ask_dot_renders_every_node() {
    let out = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = acme_args(out.path());
    args.extend([
        "ask".to_string(),
        "--dot".to_string(),
        ACME_QUESTION.to_string(),
    ]);
    let result = ragtree(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(result.status.success());

    let dot = std::fs::read_to_string(out.path().join("tree.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    for node in ["n0", "n1", "n2"] {
        assert!(dot.contains(&format!("{node} [")), "missing {node}");
    }
    assert!(dot.contains("n0 -> n1"));
    assert!(dot.contains("n0 -> n2"));
}

#[test]
fn test_missing_corpus_exits_nonzero() {
    let out = tempfile::tempdir().unwrap();
    let result = ragtree(&[
        "--corpus",
        "/nonexistent/corpus.jsonl",
        "--mock-script",
        &path_arg(&fixture("script_acme.json")),
        "--out-dir",
        &path_arg(out.path()),
        "ask",
        ACME_QUESTION,
    ]);
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("cannot ingest corpus"), "stderr: {stderr}");
}

#[test]
fn test_missing_backend_exits_nonzero() {
    let out = tempfile::tempdir().unwrap();
    let result = ragtree(&[
        "--corpus",
        &path_arg(&fixture("corpus_acme.jsonl")),
        "--out-dir",
        &path_arg(out.path()),
        "ask",
        ACME_QUESTION,
    ]);
    assert_eq!(result.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("backend"), "stderr: {stderr}");
}

#[test]
fn test_flags_beat_config_file_in_manifest() {
    let out = tempfile::tempdir().unwrap();
    let config = out.path().join("run.toml");
    std::fs::write(&config, "tau_a = 0.5\nparallelism = 3\ntop_k = 4\n").unwrap();

    let mut args: Vec<String> = acme_args(out.path());
    args.extend([
        "--config".to_string(),
        path_arg(&config),
        "--tau".to_string(),
        "0.7".to_string(),
        "ask".to_string(),
        ACME_QUESTION.to_string(),
    ]);
    let result = ragtree(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(result.status.success());

    let manifest = read_json(&out.path().join("manifest.json"));
    assert_eq!(manifest["engine"]["tau_a"], 0.7);
    assert_eq!(manifest["engine"]["parallelism"], 3);
    assert_eq!(manifest["engine"]["top_k"], 4);
}

fn qa_eval(out_dir: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![
        "--corpus".into(),
        path_arg(&fixture("corpus_qa.jsonl")),
        "--mock-script".into(),
        path_arg(&fixture("script_qa.json")),
        "--top-k".into(),
        "2".into(),
        "--out-dir".into(),
        path_arg(out_dir),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args.extend([
        "eval".to_string(),
        "--dataset".to_string(),
        path_arg(&fixture("dataset_qa.jsonl")),
    ]);
    ragtree(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn test_eval_report_matches_hand_computed_metrics() {
    let out = tempfile::tempdir().unwrap();
    let result = qa_eval(out.path(), &[]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );

    let report = read_json(&out.path().join("report.json"));
    let close = |key: &str, expect: f64| {
        let got = report[key]
            .as_f64()
            .unwrap_or_else(|| panic!("{key} missing"));
        assert!((got - expect).abs() < 1e-9, "{key}: {got} != {expect}");
    };
    assert_eq!(report["n"], 10);
    close("em", 60.0);
    close("f1", 81.0);
    close("recall", 100.0 * 6.5 / 7.0);
    close("full_coverage_rate", 100.0 * 6.0 / 7.0);
    close("rn", 1.2);
    close("re", (100.0 * 6.5 / 7.0) / 1.2);
    close("efr", 100.0 * 2.0 / 7.0);
    assert_eq!(report["mean_time_ms"], 0.0);

    let records: Vec<serde_json::Value> = std::fs::read_to_string(out.path().join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 10);
    let ids: Vec<&str> = records.iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(
        ids,
        ["e1", "e2", "e3", "e4", "e5", "e6", "e7", "e8", "e9", "e10"]
    );

    let retrieved = |i: usize| -> Vec<&str> {
        records[i]["retrieved_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect()
    };
    assert_eq!(retrieved(0), ["d1", "d4"]);
    assert_eq!(retrieved(4), ["d1", "d5"]);
    assert_eq!(retrieved(9), ["d1", "d10", "d8"]);
    assert_eq!(records[9]["retrieval_calls"], 3);
    assert_eq!(records[9]["predicted"], "42");
    for record in &records {
        assert_eq!(record["wall_time_ms"], 0.0);
        assert!(record["tree"].is_object());
        assert!(record.get("error").is_none());
    }
}

#[test]
fn test_eval_runs_are_byte_identical_and_parallel_invariant() {
    let reference = tempfile::tempdir().unwrap();
    assert!(qa_eval(reference.path(), &[]).status.success());
    let ref_records = std::fs::read(reference.path().join("records.jsonl")).unwrap();
    let ref_report = std::fs::read(reference.path().join("report.json")).unwrap();

    let repeat = tempfile::tempdir().unwrap();
    assert!(qa_eval(repeat.path(), &[]).status.success());
    assert_eq!(
        std::fs::read(repeat.path().join("records.jsonl")).unwrap(),
        ref_records
    );
    assert_eq!(
        std::fs::read(repeat.path().join("report.json")).unwrap(),
        ref_report
    );

    let parallel = tempfile::tempdir().unwrap();
    assert!(qa_eval(parallel.path(), &["--parallel", "4"])
        .status
        .success());
    assert_eq!(
        std::fs::read(parallel.path().join("records.jsonl")).unwrap(),
        ref_records
    );
    assert_eq!(
        std::fs::read(parallel.path().join("report.json")).unwrap(),
        ref_report
    );
}

#[test]
fn test_eval_empty_dataset_reports_zero_examples() {
    let out = tempfile::tempdir().unwrap();
    let dataset = out.path().join("empty.jsonl");
    std::fs::write(&dataset, "").unwrap();

    let result = ragtree(&[
        "--corpus",
        &path_arg(&fixture("corpus_qa.jsonl")),
        "--mock-script",
        &path_arg(&fixture("script_qa.json")),
        "--out-dir",
        &path_arg(out.path()),
        "eval",
        "--dataset",
        &path_arg(&dataset),
    ]);
    assert!(result.status.success());
    let report = read_json(&out.path().join("report.json"));
    assert_eq!(report["n"], 0);
    assert_eq!(report["recall"], serde_json::Value::Null);
    assert_eq!(
        std::fs::read_to_string(out.path().join("records.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn test_sweep_emits_one_row_per_distinct_cell() {
    let out = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = acme_args(out.path());
    args.extend([
        "sweep".to_string(),
        "--tau-list".to_string(),
        "0.5,0.95,0.5".to_string(),
        "--depth-list".to_string(),
        "3".to_string(),
        "--dataset".to_string(),
        path_arg(&fixture("dataset_acme.jsonl")),
    ]);
    let result = ragtree(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );

    let csv = std::fs::read_to_string(out.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "tau,max_depth,em,f1,efr,rn,mean_tree_depth");
    assert_eq!(lines.len(), 3, "duplicate tau collapses: {csv}");
    // low tau accepts the weak root candidate: wrong answer, covered evidence
    assert_eq!(lines[1], "0.5,3,0,0,100,1,0");
    // default tau decomposes and aggregates the right answer
    assert_eq!(lines[2], "0.95,3,100,100,0,3,1");
}

#[test]
fn test_index_writes_a_reloadable_snapshot() {
    use ragtree::retrieval::{Corpus, Retriever};

    let out = tempfile::tempdir().unwrap();
    let result = ragtree(&[
        "--corpus",
        &path_arg(&fixture("corpus_qa.jsonl")),
        "--out-dir",
        &path_arg(out.path()),
        "index",
    ]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("indexed 11 documents"), "stdout: {stdout}");

    let snapshot = std::fs::read_to_string(out.path().join("index.json")).unwrap();
    let corpus: Corpus = serde_json::from_str(&snapshot).unwrap();
    assert_eq!(corpus.len(), 11);
    let hits = corpus.retrieve("capital of France", 2).unwrap();
    assert_eq!(hits[0].id, "d1");
}
