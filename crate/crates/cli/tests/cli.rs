//! Runs the `mathmoe` binary end to end in temporary directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "model": {"d_model": 16, "d_ff": 16, "heads": 2, "encoder_layers": 2, "max_len": 64},
  "pretrain": {"batch_size": 4, "sc_warmup": 2},
  "finetune": {"batch_size": 4},
  "eval": {"max_new_tokens": 8}
}"#;

fn mathmoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mathmoe"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mathmoe(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mathmoe(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(mathmoe(dir.path(), &["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(mathmoe(dir.path(), &["pretrain"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = mathmoe(dir.path(), &["pretrain", "--corpus", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    fs::write(dir.path().join("bad.json"), r#"{"modle": {}}"#).unwrap();
    let out = mathmoe(dir.path(), &["--config", "bad.json", "synth-corpus", "--n", "2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let text = "\"first we add the two numbers . so the answer is $7$ .\"\n{\"text\": \"compute $2 + 3$ now .\"}\n";
    fs::write(dir.path().join("h.jsonl"), text).unwrap();
    ok(dir.path(), &["eval", "--hyp", "h.jsonl", "--ref", "h.jsonl"]);
    let report = json(&dir.path().join("out/eval.json"));
    let m = &report["tasks"]["generation"]["metrics"];
    assert_eq!(m["bleu4"], 1.0);
    assert_eq!(m["rouge2"], 1.0);
    assert_eq!(m["rougeL"], 1.0);
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("config.json"), CONFIG).unwrap();
    let base = ["--config", "config.json", "--seed", "3"];
    let run = |out: &str, args: &[&str]| {
        let mut all: Vec<&str> = base.to_vec();
        all.extend(["--out", out]);
        all.extend(args);
        ok(d, &all)
    };

    run("data", &["synth-corpus", "--kind", "arithmetic", "--n", "40", "--output", "arith.jsonl"]);
    run("data", &["synth-corpus", "--kind", "mixture", "--n", "6", "--output", "mix.jsonl"]);
    run("pre", &["pretrain", "--corpus", "arith.jsonl", "--steps", "6"]);
    let metrics = lines(&d.join("pre/metrics.jsonl"));
    assert_eq!(metrics.len(), 6);
    for key in ["step", "L_MLM", "L_DAE", "L_SSR", "L_SFR", "L_USC", "L_GSC", "L_U", "L_Z", "total"] {
        assert!(metrics[0].get(key).is_some(), "{key}");
    }

    run("ft", &["finetune", "--checkpoint", "pre/model.json", "--train", "mix.jsonl", "--steps", "6"]);
    assert_eq!(lines(&d.join("ft/finetune.jsonl")).len(), 6);
    run("ev1", &["eval", "--checkpoint", "ft/model.json", "--data", "mix.jsonl"]);
    run("ev2", &["eval", "--checkpoint", "ft/model.json", "--data", "mix.jsonl"]);
    let a = fs::read(d.join("ev1/eval.json")).unwrap();
    assert_eq!(a, fs::read(d.join("ev2/eval.json")).unwrap());
    let report = json(&d.join("ev1/eval.json"));
    for task in ["topic", "level"] {
        let acc = report["tasks"][task]["metrics"]["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(report["tasks"]["copy"]["metrics"]["bleu4"].is_number());

    fs::write(
        d.join("drafts.jsonl"),
        "{\"id\": \"a\", \"statement\": \"compute $1 + 2$ .\", \"draft\": \"we add . so the answer is $3$ .\"}\n\
         {\"statement\": \"what is $4 - 1$ ?\", \"solution\": \"we subtract . so the answer is $3$ .\"}\n",
    )
    .unwrap();
    run("ref", &["refine", "--input", "drafts.jsonl", "--pool", "arith.jsonl", "--checkpoint", "pre/model.json", "--client", "mock"]);
    let transcripts = lines(&d.join("ref/transcripts.jsonl"));
    assert_eq!(transcripts.len(), 2);
    assert_eq!(transcripts[0]["problem_id"], "a");
    assert_eq!(transcripts[1]["problem_id"], "1");
    for t in &transcripts {
        assert_eq!(t["steps"].as_array().unwrap().len(), 9);
        assert_eq!(t["status"], "complete");
    }
    assert_eq!(transcripts[1]["final_solution"], "we subtract . so the answer is $3$ .");

    // A saved index works as the pool too.
    run("ref2", &["refine", "--input", "drafts.jsonl", "--pool", "ref/index.json", "--checkpoint", "pre/model.json", "--T", "1", "--B", "2"]);
    let short = lines(&d.join("ref2/transcripts.jsonl"));
    assert_eq!(short[0]["steps"].as_array().unwrap().len(), 3);
    assert_eq!(short[0]["steps"][0]["exemplar_ids"].as_array().unwrap().len(), 2);

    run("ret", &["retrieve", "--checkpoint", "pre/model.json", "--pool", "arith.jsonl", "--query-file", "drafts.jsonl", "--top", "3", "--composition", "statement-draft"]);
    let hits = lines(&d.join("ret/retrieved.jsonl"));
    assert_eq!(hits.len(), 2);
    assert_eq!(hits[0]["hits"].as_array().unwrap().len(), 3);

    run("route", &["route-report", "--checkpoint", "ft/model.json", "--corpus", "mix.jsonl", "--task", "topic"]);
    let rows = json(&d.join("route/routing.json"));
    let row = &rows[0];
    for key in ["token", "kind", "layer", "expert", "gate"] {
        assert!(row.get(key).is_some(), "{key}");
    }

    run("gc", &["gradcheck", "--corpus", "arith.jsonl", "--per-param", "2"]);
    assert_eq!(json(&d.join("gc/gradcheck.json"))["pass"], true);
}
