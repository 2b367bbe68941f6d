//! Trains the transformer twin and the MLP baseline on the same synthetic
//! data and compares them on held-out trajectories.
//!
//! `cargo run --release --example twin_benchmark [config.json]`

use cormpo::bench::{twin_benchmark, TwinBenchConfig};
use cormpo::twin::TwinEvalReport;

fn row(name: &str, r: &TwinEvalReport) {
    println!(
        "{name:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>7.3} {:>8.4} {:>8.4} {:>8.4}",
        r.mae_all, r.mae_map, r.mae_static_pl, r.mae_changing_pl, r.trend_accuracy, r.crps, r.crps_point_mean, r.crps_noise_baseline
    );
}

fn main() -> cormpo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORMPO_LOG", "info")).init();
    let cfg: TwinBenchConfig = match std::env::args().nth(1) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => TwinBenchConfig::desk(),
    };
    let (_, r) = twin_benchmark(&cfg)?;
    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>8} {:>7} {:>8} {:>8} {:>8}",
        "model", "mae", "mae_map", "static", "change", "trend", "crps", "crps_pt", "crps_nz"
    );
    row("transformer", &r.transformer);
    row("mlp", &r.mlp);
    println!(
        "holdout MSE: transformer {:.4} over {} epochs, mlp {:.4} over {} epochs; {:.1}s",
        r.transformer_log.best_holdout_mse(),
        r.transformer_log.holdout_mse.len(),
        r.mlp_log.best_holdout_mse(),
        r.mlp_log.holdout_mse.len(),
        r.seconds
    );
    Ok(())
}
