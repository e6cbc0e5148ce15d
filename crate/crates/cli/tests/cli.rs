use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(sub: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(sub)
}

fn cfsize(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfsize"))
        .args(args)
        .env_remove("CFSIZE_FIXTURES")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_format_is_a_usage_error() {
    let out = cfsize(&["report", "accuracy", "--outcomes", "x.jsonl", "--format", "xml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("xml"));
}

#[test]
fn evaluate_replays_golden_outcomes() {
    let corpus = data("ablation");
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("outcomes.jsonl");
    let out = cfsize(&[
        "--fixtures",
        s(&corpus.join("fixtures")),
        "evaluate",
        "--pairs",
        s(&corpus.join("items.jsonl")),
        "--images",
        s(&corpus.join("images")),
        "--db",
        s(&corpus.join("db.jsonl")),
        "--out",
        s(&out_path),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(&out_path).unwrap(),
        std::fs::read(corpus.join("golden_outcomes.jsonl")).unwrap()
    );
}

#[test]
fn evaluate_reports_item_errors_in_band() {
    let corpus = data("ablation");
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    std::fs::write(
        &pairs,
        "{\"image_id\":\"scene00\",\"small\":\"button\",\"big\":\"walrus\"}\n{\"image_id\":\"nope\",\"small\":\"button\",\"big\":\"walrus\"}\n",
    )
    .unwrap();
    let out_path = dir.path().join("o.jsonl");
    let out = cfsize(&[
        "--fixtures",
        s(&corpus.join("fixtures")),
        "evaluate",
        "--pairs",
        s(&pairs),
        "--images",
        s(&corpus.join("images")),
        "--db",
        s(&corpus.join("db.jsonl")),
        "--out",
        s(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["status"], "ok");
    assert_eq!(lines[1]["status"], "error");
    assert_eq!(lines[1]["image_id"], "nope");
}

#[test]
fn ablate_writes_four_ranked_rows() {
    let corpus = data("ablation");
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("table.csv");
    let out = cfsize(&[
        "ablate",
        "--corpus",
        s(&corpus),
        "--annotations",
        s(&corpus.join("annotations.jsonl")),
        "--out",
        s(&table),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("variant,f1,rank"));
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "full",
            "without_adaptive_thresholds",
            "without_adaptive_thresholds_and_label_verification",
            "without_all_refinements"
        ]
    );
    let ranks: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert_eq!(ranks, ["1", "2", "3", "4"]);
}

#[test]
fn accuracy_report_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let outcomes = dir.path().join("o.jsonl");
    let golden = std::fs::read_to_string(data("ablation").join("golden_outcomes.jsonl")).unwrap();
    let mut text = String::new();
    for (seed, line) in [40u64, 41, 42].iter().cycle().zip(golden.lines()) {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        v["seed"] = (*seed).into();
        text.push_str(&v.to_string());
        text.push('\n');
    }
    std::fs::write(&outcomes, text).unwrap();
    let out = cfsize(&["report", "accuracy", "--outcomes", s(&outcomes), "--tau", "1.0", "--seeds", "40,41,42"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,mean,std,n"));
    assert!(lines.next().unwrap().ends_with(",21"));

    let json = cfsize(&["report", "accuracy", "--outcomes", s(&outcomes), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["per_seed"].as_array().unwrap().len(), 3);

    let one_seed = cfsize(&["report", "accuracy", "--outcomes", s(&outcomes), "--seeds", "40"]);
    assert_eq!(one_seed.status.code(), Some(1));
}

#[test]
fn db_validate_and_query() {
    let db = data("ablation").join("db.jsonl");
    let out = cfsize(&["db", "validate", s(&db)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("5 entries"));

    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.json");
    std::fs::write(&q, "[0.1, 2.0, 0.0, 0.0, 0.3]").unwrap();
    let out = cfsize(&["db", "query", s(&db), "--vector-file", s(&q)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["index"], 1);

    std::fs::write(&q, "[1.0, 0.0]").unwrap();
    assert_eq!(cfsize(&["db", "query", s(&db), "--vector-file", s(&q)]).status.code(), Some(1));
}

#[test]
fn build_dataset_then_train() {
    let corpus = data("dataset");
    let dir = tempfile::tempdir().unwrap();
    let build = |out: &Path| {
        cfsize(&[
            "--fixtures",
            s(&corpus.join("fixtures")),
            "build-dataset",
            "--catalog",
            s(&corpus.join("catalog.json")),
            "--few-shot",
            s(&corpus.join("few_shot.txt")),
            "--db",
            s(&corpus.join("db.jsonl")),
            "--images",
            s(&corpus.join("images")),
            "--rewrites",
            "4",
            "--out",
            s(out),
        ])
    };
    let out = build(dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["records"], 36);
    let again: serde_json::Value = serde_json::from_slice(&build(dir.path()).stdout).unwrap();
    assert_eq!(again["new_records"], 0);

    let model = dir.path().join("model.json");
    let out = cfsize(&[
        "dpo-toy-train",
        "--triplets",
        s(&dir.path().join("triplets.jsonl")),
        "--steps",
        "50",
        "--out",
        s(&model),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(m["version"], 1);
}

#[test]
fn missing_backend_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = dir.path().join("b.txt");
    std::fs::write(&prompts, "Big button and small walrus. The walrus is much smaller than the button.\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cfsize"))
        .args(["rank", "--base-prompts", s(&prompts), "--out", s(&dir.path().join("r.jsonl"))])
        .env_remove("CFSIZE_FIXTURES")
        .env_remove("CFSIZE_REWRITER_URL")
        .env_remove("CFSIZE_SCORER_URL")
        .env_remove("CFSIZE_DETECTOR_URL")
        .env_remove("CFSIZE_EMBEDDER_URL")
        .env_remove("CFSIZE_GENERATOR_URL")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no backend"));
}
