use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mixkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("MIXKIT_REPORT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MIX: &str = r#"{"buckets": [
  {"name": "french", "unique_tokens": 303510000000, "target_tokens": 1240080000000},
  {"name": "english", "unique_tokens": 655640000000, "target_tokens": 1240090000000},
  {"name": "code", "unique_tokens": 141430000000, "target_tokens": 288920000000},
  {"name": "parallel", "unique_tokens": 35780000000, "target_tokens": 219260000000}
]}"#;

#[test]
fn plan_mix_prints_table_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mix.json"), MIX).unwrap();
    let out = mixkit(dir.path(), &["plan-mix", "--input", "mix.json", "--output", "plan.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for ratio in ["4.09", "1.89", "2.04", "6.13", "2988.35"] {
        assert!(text.contains(ratio), "{ratio} missing from\n{text}");
    }
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("plan.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], "plan-mix");
    assert_eq!(manifest["inputs"][0]["path"], "mix.json");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("plan.json.report.json").is_file());
}

#[test]
fn unknown_stage_exits_one_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mix.json"), MIX).unwrap();
    fs::write(
        dir.path().join("pipeline.json"),
        r#"{"stages": [
            {"stage": "plan-mix", "input": "mix.json", "output": "plan.json"},
            {"stage": "no-such-stage", "input": "plan.json", "output": "x.json"}
        ]}"#,
    )
    .unwrap();
    let out = mixkit(dir.path(), &["run", "--config", "pipeline.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no-such-stage"), "{}", stderr(&out));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
}

#[test]
fn unknown_field_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mix.json"), MIX).unwrap();
    fs::write(dir.path().join("stage.json"), r#"{"input": "mix.json", "output": "p.json", "ouput": "q.json"}"#)
        .unwrap();
    let out = mixkit(dir.path(), &["plan-mix", "--config", "stage.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("ouput"), "{}", stderr(&out));
}

#[test]
fn missing_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixkit(dir.path(), &["dedup-exact", "--input", "nope.jsonl", "--output", "o.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope.jsonl"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unwritable_output_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mix.json"), MIX).unwrap();
    fs::create_dir(dir.path().join("taken")).unwrap();
    let out = mixkit(dir.path(), &["plan-mix", "--input", "mix.json", "--output", "taken"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn flags_override_config_in_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("conf");
    fs::create_dir(&sub).unwrap();
    fs::write(sub.join("lm.json"), r#"{"input": "docs.jsonl", "output": "lm.arpa", "order": 3}"#).unwrap();
    let out = mixkit(
        dir.path(),
        &["--seed", "5", "--print-effective-config", "train-lm", "--config", "conf/lm.json", "--order", "4"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["stage"]["order"], 4);
    assert_eq!(v["stage"]["input"], "docs.jsonl");
    assert_eq!(v["stage"]["unigram_floor"], true);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn budget_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "budget",
        "--output",
        "b.json",
        "--micro-batch",
        "8",
        "--seq-len",
        "2048",
        "--grad-accum",
        "4",
        "--devices",
        "240",
        "--tokens-total",
        "3000000000000",
        "--mean-tflops",
        "120",
        "--gpu-hours",
        "99648",
        "--energy-gpu-hours",
        "123000",
        "--tdp-watts",
        "400",
        "--grid-gco2-per-kwh",
        "57",
        "--pue",
        "1.2",
    ];
    let out = mixkit(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(v["tokens_per_step"], 15_728_640);
    assert_eq!(v["energy_mwh"], 49.2);
}

#[test]
fn report_dir_flag_collects_reports() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("mix.json"), MIX).unwrap();
    let out = mixkit(dir.path(), &["--report-dir", "reports", "plan-mix", "--input", "mix.json", "--output", "p.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("reports/plan-mix.report.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["buckets"], 4);
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixkit(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("fit-scaling"));
}
