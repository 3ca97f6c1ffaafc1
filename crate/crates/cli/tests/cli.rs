use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dmll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmll"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{e}: {l}")))
        .collect()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_expected_loss_check_reports_success() {
    let out = dmll(&["verify", "--check", "eq5", "--k", "10", "--trials", "100"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let lines = json_lines(&out);
    assert_eq!(lines[0]["command"], "verify");
    assert_eq!(lines[0]["config"]["check"], "eq5");
    assert_eq!(lines[1]["k_max"], 10);
    assert_eq!(lines[1]["passed"], true);
}

#[test]
fn verify_metrics_and_gradients() {
    for check in ["metrics", "grad"] {
        let out = dmll(&["verify", "--check", check, "--trials", "10", "--seed", "3"]);
        assert_eq!(out.status.code(), Some(0), "{check}");
        assert_eq!(json_lines(&out)[1]["passed"], true);
    }
}

#[test]
fn usage_errors_exit_with_status_two() {
    let missing = dmll(&["train", "--out-dir", "x"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
    assert_eq!(
        dmll(&["verify", "--check", "eq5", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(dmll(&["verify", "--check", "nope"]).status.code(), Some(2));
}

#[test]
fn generate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = dmll(&[
            "generate",
            "--seed",
            "42",
            "--n",
            "200",
            "--heldout",
            "50",
            "--out-dir",
            path_str(dir.path()),
        ]);
        assert_eq!(out.status.code(), Some(0));
        assert_eq!(json_lines(&out)[0]["config"]["seed"], 42);
    }
    for name in [
        "full.jsonl",
        "determined.jsonl",
        "heldout.jsonl",
        "stats.json",
        "world.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn label_count_generation_reports_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmll(&[
        "generate",
        "--source",
        "label-counts",
        "--k",
        "20",
        "--n",
        "5717",
        "--mean-labels",
        "1.38",
        "--out-dir",
        path_str(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stats = &json_lines(&out)[1];
    assert_eq!(stats["n"], 5717);
    let fraction = stats["positive_fraction"].as_f64().unwrap();
    assert!((fraction - 0.069).abs() < 0.01);
}

#[test]
fn full_pipeline_with_file_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    fs::write(
        d.join("vocab.txt"),
        (0..30).map(|i| format!("word{i}\n")).collect::<String>(),
    )
    .unwrap();

    let gen = dmll(&[
        "generate",
        "--k",
        "5",
        "--d",
        "6",
        "--n",
        "400",
        "--heldout",
        "200",
        "--out-dir",
        &p(""),
    ]);
    assert_eq!(gen.status.code(), Some(0));
    let embed = dmll(&[
        "embed",
        "--data",
        &p("determined.jsonl"),
        "--vocab",
        &p("vocab.txt"),
        "--dim",
        "8",
        "--sigma",
        "2",
        "--out",
        &p("emb.bin"),
    ]);
    assert_eq!(
        embed.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&embed.stderr)
    );
    // 5 targets + 30 vocabulary prompts + 2 composed prompts per target.
    assert_eq!(json_lines(&embed)[1]["prompts"], 45);

    let before = fs::read(d.join("determined.jsonl")).unwrap();
    let train = dmll(&[
        "train",
        "--train",
        &p("determined.jsonl"),
        "--heldout",
        &p("heldout.jsonl"),
        "--vocab",
        &p("vocab.txt"),
        "--provider",
        "file",
        "--embeddings",
        &p("emb.bin"),
        "--epochs",
        "4",
        "--prompt-update-period",
        "2",
        "--sigma",
        "2",
        "--batch-size",
        "64",
        "--out-dir",
        &p("run"),
    ]);
    assert_eq!(
        train.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    assert_eq!(fs::read(d.join("determined.jsonl")).unwrap(), before);
    let lines = json_lines(&train);
    assert_eq!(lines[0]["config"]["train_config"]["loss_mode"], "rc");
    assert_eq!(lines[1]["epochs"], 4);
    assert!(lines[1]["final_map"].as_f64().unwrap() > lines[1]["initial_map"].as_f64().unwrap());
    assert_eq!(
        fs::read_to_string(d.join("run/history.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let eval = dmll(&[
        "eval",
        "--model",
        &p("run/model.json"),
        "--data",
        &p("heldout.jsonl"),
        "--csv",
        &p("ap.csv"),
    ]);
    assert_eq!(eval.status.code(), Some(0));
    let metrics = &json_lines(&eval)[1];
    let history: Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/history.json")).unwrap()).unwrap();
    assert_eq!(metrics["map"], history["epochs"][3]["metrics"]["map"]);
    for key in ["one_error", "ranking_loss", "coverage"] {
        assert!(metrics[key].is_number(), "{key}");
    }
    assert_eq!(
        fs::read_to_string(d.join("ap.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );

    let report = dmll(&[
        "report",
        "--history",
        &p("run/history.json"),
        "--out",
        &p("table.csv"),
    ]);
    assert_eq!(report.status.code(), Some(0));
    let table = fs::read_to_string(d.join("table.csv")).unwrap();
    assert!(table.starts_with("epoch,loss,map,one_error,ranking_loss,coverage,lambdas\n0,,"));
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn module_errors_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    assert_eq!(
        dmll(&["generate", "--k", "3", "--n", "50", "--out-dir", &p("a")])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        dmll(&["generate", "--k", "4", "--n", "50", "--out-dir", &p("b")])
            .status
            .code(),
        Some(0)
    );
    let train = dmll(&[
        "train",
        "--train",
        &p("a/determined.jsonl"),
        "--epochs",
        "1",
        "--out-dir",
        &p("run"),
    ]);
    assert_eq!(train.status.code(), Some(0));

    let eval = dmll(&[
        "eval",
        "--model",
        &p("run/model.json"),
        "--data",
        &p("b/full.jsonl"),
    ]);
    assert_eq!(eval.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&eval.stderr).unwrap();
    assert_eq!(err["error"], "dimension_mismatch");
    let message = err["message"].as_str().unwrap();
    assert!(message.contains('3') && message.contains('4'), "{message}");

    let missing = dmll(&[
        "train",
        "--train",
        &p("nope.jsonl"),
        "--out-dir",
        &p("run2"),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"], "io");
}
