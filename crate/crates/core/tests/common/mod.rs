#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// Run configuration small enough for every stage to finish in seconds.
pub const TINY_CONFIG: &str = r#"{
  "generator": { "n_trajectories": 60, "seed": 3 },
  "noise": { "seed": 4 },
  "twin": {
    "transformer": { "n_encoder_layers": 1, "n_heads": 2, "model_dim": 8, "ffn_dim": 16, "decoder_hidden": 16, "dropout_p": 0.1 },
    "mlp": { "hidden": [16], "dropout_p": 0.2 },
    "train": { "max_epochs": 2, "batch_size": 64, "seed": 5 }
  },
  "guardian": { "k": 20 },
  "orl": {
    "hidden": [16], "dynamics_hidden": [16], "ensemble_size": 3, "n_elites": 2,
    "dynamics_max_epochs": 3, "epochs": 2, "steps_per_epoch": 20, "batch_size": 32,
    "rollout_batch": 20, "rollout_freq": 20, "seed": 6
  },
  "eval": { "n_episodes": 10, "seeds": [0, 1] }
}"#;

pub fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, TINY_CONFIG).unwrap();
    p
}

pub fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["cormpo"];
    argv.extend_from_slice(args);
    cormpo::cli::run(argv)
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Runs every pipeline stage into `out`, panicking on a nonzero exit.
pub fn run_pipeline(out: &Path, config: &Path) {
    let o = s(out);
    let c = s(config);
    let data = s(&out.join("dataset.jsonl"));
    let noisy = s(&out.join("noisy.jsonl"));
    let twin = s(&out.join("twin.ctwn"));
    let guardian = s(&out.join("guardian.ckde"));
    let ensemble = s(&out.join("ensemble.cens"));
    let pol_cormpo = s(&out.join("policy_cormpo.cpol"));
    let pol_bc = s(&out.join("policy_bc.cpol"));
    let eval_cormpo = s(&out.join("eval_cormpo.json"));
    let eval_bc = s(&out.join("eval_bc.json"));
    let stages: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--n", "60"],
        vec!["inject-noise", "--data", &data],
        vec!["train-twin", "--data", &data],
        vec!["train-twin", "--data", &data, "--kind", "mlp", "--name", "mlp.ctwn"],
        vec!["eval-twin", "--twin", &twin, "--data", &noisy, "--samples", "5"],
        vec!["fit-guardian", "--data", &noisy],
        vec!["train-policy", "--algo", "mbpo", "--data", &noisy, "--save-ensemble"],
        vec!["train-policy", "--algo", "cormpo", "--data", &noisy, "--guardian", &guardian, "--ensemble", &ensemble],
        vec!["train-policy", "--algo", "bc", "--data", &noisy],
        vec!["evaluate", "--policy", &pol_cormpo, "--twin", &twin],
        vec!["evaluate", "--policy", &pol_bc, "--oracle"],
        vec!["verify-bounds", "--instances", "4"],
        vec!["report", "--eval", &eval_cormpo, &eval_bc],
    ];
    for stage in stages {
        let mut args: Vec<&str> = vec!["--config", &c, "--out", &o, "--threads", "1"];
        args.extend(stage.iter().copied());
        assert_eq!(cli(&args), 0, "stage failed: {stage:?}");
    }
}

/// Every regular file under `dir` with its bytes, sorted by name.
pub fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
