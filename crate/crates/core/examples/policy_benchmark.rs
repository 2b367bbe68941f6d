//! Desk-scale comparison of BC, MBPO, MOPO and CORMPO on noisy synthetic
//! data, evaluated in a twin trained on the clean data, plus the reward
//! drop between clean and noisy training.
//!
//! `cargo run --release --example policy_benchmark [config.json]`

use cormpo::bench::{policy_benchmark, PolicyBenchConfig};
use cormpo::eval::{drop_table, report_table};

fn main() -> cormpo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORMPO_LOG", "info")).init();
    let cfg: PolicyBenchConfig = match std::env::args().nth(1) {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => PolicyBenchConfig::default(),
    };
    let res = policy_benchmark(&cfg)?;
    println!("noisy data, twin evaluation\n{}", report_table(&res.twin_rows()));
    let oracle: Vec<_> = res.noisy.iter().map(|r| (r.algo.name().to_string(), r.oracle.clone())).collect();
    println!("noisy data, simulator evaluation\n{}", report_table(&oracle));
    if !res.drops.is_empty() {
        println!("reward drop, clean -> noisy\n{}", drop_table(&res.drops));
    }
    for r in res.noisy.iter().chain(&res.clean) {
        println!("{:<7} trained in {:.1}s", r.algo.name(), r.train_seconds);
    }
    println!("total {:.1}s", res.seconds);
    Ok(())
}
