use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const CONFIG: &str = r#"{"seed": 3, "synth": {"n_patients": 80, "readmit_rate": 0.3},
    "train": {"max_epochs": 3, "t_ehr": 3, "t_cxr": 3, "kappa": 5.0, "d_hidden": 64, "h_mlp": 128},
    "explain": {"mask_epochs": 20}}"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_readmit"))
        .args(args)
        .current_dir(dir)
        .env_remove("READMIT_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = run(args, dir);
    assert!(out.status.success(), "readmit {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Synthesized, prepared, graphed and trained once for every test.
fn fixture() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        std::fs::write(d.join("config.json"), CONFIG).unwrap();
        ok(&["synth", "--out", "synth", "--config", "config.json"], d);
        ok(&["prepare", "--cohort", "synth/cohort.jsonl", "--out", "prep", "--config", "config.json"], d);
        ok(&["graph", "--prepared", "prep", "--out", "graph", "--config", "config.json"], d);
        ok(&["train", "--prepared", "prep", "--graph", "graph", "--out", "train", "--config", "config.json"], d);
        dir
    })
    .path()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn exit_codes_follow_error_class() {
    let d = fixture();
    std::fs::write(d.join("bad.json"), r#"{"no_such_key": 1}"#).unwrap();
    let code = |args: &[&str]| run(args, d).status.code();
    assert_eq!(code(&["synth", "--out", "x", "--config", "bad.json"]), Some(2));
    assert_eq!(code(&["graph", "--prepared", "prep", "--out", "g2", "--kappa", "50"]), Some(2));
    assert_eq!(code(&["prepare", "--cohort", "missing.jsonl", "--out", "p2"]), Some(3));
    // A prediction file compared with itself has no variance to test.
    assert_eq!(code(&["compare", "train/predictions.csv", "train/predictions.csv"]), Some(4));
    let usage = run(&["train"], d);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn prepare_is_idempotent() {
    let d = fixture();
    ok(&["prepare", "--cohort", "synth/cohort.jsonl", "--out", "prep_again", "--config", "config.json"], d);
    assert_eq!(files(&d.join("prep")), files(&d.join("prep_again")));
}

#[test]
fn saved_run_config_reproduces_predictions() {
    let d = fixture();
    ok(&["train", "--prepared", "prep", "--graph", "graph", "--out", "rerun", "--config", "train/run_config.json"], d);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("train/predictions.csv"), read("rerun/predictions.csv"));
}

#[test]
fn flags_override_env_which_overrides_config() {
    let d = fixture();
    let seed_of = |out: &str, flag: Option<&str>| {
        let mut args = vec!["synth", "--out", out, "--config", "config.json"];
        args.extend(flag.map(|s| ["--seed", s]).into_iter().flatten());
        let status = Command::new(env!("CARGO_BIN_EXE_readmit")).args(&args).current_dir(d).env("READMIT_SEED", "7").output().unwrap();
        assert!(status.status.success());
        let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join(out).join("run_config.json")).unwrap()).unwrap();
        cfg["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("env_seed", None), 7);
    assert_eq!(seed_of("flag_seed", Some("42")), 42);
}

#[test]
fn eval_and_compare_write_reports() {
    let d = fixture();
    ok(&["train", "--prepared", "prep", "--graph", "graph", "--out", "lstm", "--config", "config.json", "--model", "lstm"], d);
    ok(&["eval", "--predictions", "train", "--out", "eval", "--compare", "lstm/predictions.csv", "--config", "config.json"], d);
    for f in ["eval_report.json", "roc.csv", "pr.csv"] {
        assert!(d.join("eval").join(f).is_file(), "{f}");
    }
    let out = ok(&["compare", "train/predictions.csv", "lstm/predictions.csv", "--out", "cmp"], d);
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let p = result["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(d.join("cmp/delong.json").is_file());
}

#[test]
fn explain_reports_a_node() {
    let d = fixture();
    let preds = std::fs::read_to_string(d.join("train/predictions.csv")).unwrap();
    let node = preds.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    ok(
        &["explain", "--prepared", "prep", "--checkpoint", "train", "--graph", "graph", "--node", &node, "--out", "explain", "--config", "config.json"],
        d,
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("explain/explanation.json")).unwrap()).unwrap();
    assert!(report.to_string().contains(&node));
    assert!(d.join("explain/masks.json").is_file());
    let missing = run(&["explain", "--prepared", "prep", "--checkpoint", "train", "--node", "nope", "--out", "e2"], d);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn search_runs_every_trial() {
    let d = fixture();
    ok(&["search", "--prepared", "prep", "--out", "search", "--config", "config.json", "--budget", "2", "--jobs", "2", "--max-epochs", "2"], d);
    let results = std::fs::read_to_string(d.join("search/search_results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    assert!(d.join("search/best_config.json").is_file());
    assert!(d.join("search/trial_000/predictions.csv").is_file());
}
