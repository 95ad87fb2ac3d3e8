use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn spangen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spangen")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spangen(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn build_corpus(root: &Path, cases: &str) -> std::path::PathBuf {
    let dir = root.join("corpus");
    ok(&["corpus-build", "--seed", "4", "--cases", cases, "--run-dir", s(&dir)]);
    dir
}

const TINY: [&str; 12] = [
    "--set",
    "model.d=8",
    "--set",
    "train.grounding_epochs=1",
    "--set",
    "train.posterior_warmup_epochs=1",
    "--set",
    "train.validation_cases=4",
    "--set",
    "decode.min_len=2",
    "--set",
    "decode.max_len=6",
];

#[test]
fn one2many_prints_two_in_five_as_forty_percent() {
    let root = tempfile::tempdir().unwrap();
    let log = root.path().join("log.jsonl");
    let mut lines = String::new();
    for case in ["a", "b", "c"] {
        let reps: Vec<Value> = [0, 2, 0, 2, 2]
            .iter()
            .enumerate()
            .map(|(i, g)| serde_json::json!({"grounding": {"start": g, "end": g}, "tokens": [format!("t{i}")]}))
            .collect();
        lines.push_str(&serde_json::json!({"case_id": case, "repetitions": reps}).to_string());
        lines.push('\n');
    }
    fs::write(&log, lines).unwrap();
    let printed = ok(&["one2many", "--log", s(&log), "--run-dir", s(&root.path().join("run"))]);
    let v: Value = serde_json::from_str(printed.trim()).unwrap();
    assert_eq!(v["unique_grounding_ratio"], 0.4);
    assert_eq!(v["unique_generation_ratio"], 1.0);
    assert_eq!(v["effect_of_grounding"], 2.5);
}

#[test]
fn filter_counts_add_up_to_the_input() {
    let root = tempfile::tempdir().unwrap();
    let corpus = build_corpus(root.path(), "12");
    let run = root.path().join("filter");
    ok(&["corpus-filter", "--corpus", s(&corpus.join("corpus.jsonl")), "--run-dir", s(&run)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("reports/filter.json")).unwrap()).unwrap();
    let rejected: u64 = report["rejected"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(report["input"].as_u64().unwrap(), 12);
    assert_eq!(report["accepted"].as_u64().unwrap() + rejected, 12);
    let config: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["command"], "corpus-filter");
    assert_eq!(config["provenance"]["train.mu"], "default");
}

#[test]
fn train_twice_then_generate_ten_cases() {
    let root = tempfile::tempdir().unwrap();
    let corpus = build_corpus(root.path(), "14");
    let file = corpus.join("corpus.jsonl");
    let mut logs = Vec::new();
    for round in ["a", "b"] {
        let run = root.path().join(format!("train-{round}"));
        let mut args = vec!["train", "--seed", "4", "--epochs", "1", "--corpus", s(&file), "--run-dir", s(&run)];
        args.extend(TINY);
        ok(&args);
        logs.push(fs::read(run.join("logs/metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(String::from_utf8_lossy(&logs[0]).lines().count(), 2);

    let ckpt = root.path().join("train-a/checkpoints/epoch-1.json");
    let head: String = fs::read_to_string(&file).unwrap().lines().take(10).map(|l| format!("{l}\n")).collect();
    let ten = root.path().join("ten.jsonl");
    fs::write(&ten, head).unwrap();
    let gen = root.path().join("generate");
    let mut args = vec!["generate", "--repetitions", "5", "--checkpoint", s(&ckpt), "--corpus", s(&ten), "--run-dir", s(&gen)];
    args.extend(TINY);
    ok(&args);
    let log = fs::read_to_string(gen.join("logs/generations.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["repetitions"].as_array().unwrap().len(), 5);
    }

    let eval = root.path().join("evaluate");
    ok(&["evaluate", "--log", s(&gen.join("logs/generations.jsonl")), "--corpus", s(&ten), "--run-dir", s(&eval)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(eval.join("reports/metrics.json")).unwrap()).unwrap();
    assert!(report["bleu_1"].as_f64().is_some(), "{report}");
}

#[test]
fn failures_exit_nonzero_and_name_the_culprit() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("nope.jsonl");
    let out = spangen(&["one2many", "--log", s(&missing), "--run-dir", s(&root.path().join("r1"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));

    let out = spangen(&["corpus-build", "--set", "train.lamda=2", "--run-dir", s(&root.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lamda"));

    let corpus = build_corpus(root.path(), "6");
    let file = corpus.join("corpus.jsonl");
    let run = root.path().join("train");
    let mut args = vec!["train", "--epochs", "1", "--corpus", s(&file), "--run-dir", s(&run)];
    args.extend(TINY);
    ok(&args);
    let ckpt = run.join("checkpoints/epoch-1.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&ckpt).unwrap()).unwrap();
    v["header"]["schema_version"] = Value::from(99);
    let bad = root.path().join("bad.json");
    fs::write(&bad, v.to_string()).unwrap();
    let out = spangen(&["generate", "--checkpoint", s(&bad), "--corpus", s(&file), "--run-dir", s(&root.path().join("r3"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"), "{}", String::from_utf8_lossy(&out.stderr));
}
