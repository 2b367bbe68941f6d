mod common;

use common::{artifacts, cli, run_pipeline, write_config};
use cormpo::cli::EvalFile;
use cormpo::dataset::Dataset;

#[test]
fn exit_codes() {
    assert_eq!(cli(&["--bogus"]), 1);
    assert_eq!(cli(&["train-policy", "--algo", "dqn", "--data", "x.jsonl"]), 1);
    assert_eq!(cli(&["--help"]), 0);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // validation: fraction outside [0, 1]
    assert_eq!(cli(&["--out", out, "inject-noise", "--data", "missing.jsonl", "--fraction", "1.5"]), 1);
    // runtime: input file does not exist
    assert_eq!(cli(&["--out", out, "inject-noise", "--data", "missing.jsonl"]), 2);
    assert_eq!(cli(&["--out", out, "verify-bounds", "--instances", "0"]), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"orl": {"gamma": 2.0}}"#).unwrap();
    assert_eq!(cli(&["--config", bad.to_str().unwrap(), "--out", out, "gen-data", "--n", "2"]), 1);
    std::fs::write(&bad, r#"{"unknown": 1}"#).unwrap();
    assert_eq!(cli(&["--config", bad.to_str().unwrap(), "--out", out, "gen-data", "--n", "2"]), 1);
}

#[test]
fn cormpo_without_guardian_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cli(&["--out", out, "gen-data", "--n", "5"]), 0);
    let data = dir.path().join("dataset.jsonl");
    assert_eq!(cli(&["--out", out, "train-policy", "--algo", "cormpo", "--data", data.to_str().unwrap()]), 1);
}

#[test]
fn gen_data_writes_dataset_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cli(&["--out", out, "--seed", "9", "gen-data", "--n", "10", "--horizon", "4"]), 0);
    let p = dir.path().join("dataset.jsonl");
    let ds = Dataset::read_jsonl(&p).unwrap();
    assert_eq!(ds.len(), 40);
    let meta = Dataset::read_meta(&p).unwrap();
    assert_eq!(meta.generator.seed, 9);
    assert_eq!(meta.n_trajectories, 10);
    assert!(meta.noise.is_none());
}

#[test]
fn pipeline_runs_and_reruns_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = write_config(a.path());
    run_pipeline(a.path(), &cfg);
    let cfg_b = write_config(b.path());
    run_pipeline(b.path(), &cfg_b);
    let fa = artifacts(a.path());
    let fb = artifacts(b.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "dataset.jsonl",
        "dataset.jsonl.meta.json",
        "noisy.jsonl",
        "twin.ctwn",
        "mlp.ctwn",
        "twin_eval.json",
        "guardian.ckde",
        "policy_mbpo.cpol",
        "policy_cormpo.cpol",
        "policy_bc.cpol",
        "train_cormpo.jsonl",
        "ensemble.cens",
        "eval_cormpo.json",
        "eval_bc.json",
        "bounds.json",
        "report.csv",
    ] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert_eq!(fa.len(), fb.len());
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between reruns");
    }
    let e: EvalFile = serde_json::from_slice(&std::fs::read(a.path().join("eval_cormpo.json")).unwrap()).unwrap();
    assert_eq!(e.label, "cormpo");
    assert_eq!(e.report.n_episodes, 20);
    let bounds: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("bounds.json")).unwrap()).unwrap();
    assert_eq!(bounds["violations"], 0);
}
