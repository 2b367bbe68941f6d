//! Evaluates fixed reference policies in the synthetic simulator: the
//! scripted expert, holding the starting level, and a constant P2.
//!
//! `cargo run --release --example evaluate_baselines`

use cormpo::domain::PLevel;
use cormpo::eval::{evaluate_policy, report_table, EvalConfig, SynthOracle};
use cormpo::policy::{ConstantPolicy, HoldPolicy, Policy};
use cormpo::synth::{GeneratorConfig, ScriptedExpert, SynthEnv};

fn main() -> cormpo::Result<()> {
    let env = SynthOracle(SynthEnv::new(GeneratorConfig { seed: 9, ..Default::default() }));
    let cfg = EvalConfig { n_episodes: 300, ..EvalConfig::default() };
    let policies: [(&str, &dyn Policy); 3] =
        [("expert", &ScriptedExpert), ("hold", &HoldPolicy), ("constant P2", &ConstantPolicy(PLevel::new(2)?))];
    let mut reports = Vec::new();
    for (name, p) in policies {
        reports.push((name.to_string(), evaluate_policy(p, &env, &cfg)?));
    }
    println!("{}", report_table(&reports));
    Ok(())
}
