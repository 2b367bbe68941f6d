//! Fits the density guardian on expert data and shows how the uncertainty
//! signal separates in-distribution actions from unusual ones.
//!
//! `cargo run --release --example density_guardian`

use cormpo::domain::PLevel;
use cormpo::guardian::{guardian_fit, GuardianConfig};
use cormpo::synth::{GeneratorConfig, ScriptedExpert, SynthEnv};

fn main() -> cormpo::Result<()> {
    let env = SynthEnv::new(GeneratorConfig { n_trajectories: 800, seed: 3, ..Default::default() });
    let ds = env.generate_dataset(&ScriptedExpert)?;
    let (model, fit) = guardian_fit(&ds, &GuardianConfig::default())?;
    println!(
        "tau = {:.3}  reference {}  validation {}  validation OOD fraction {:.3}",
        fit.tau, fit.n_reference, fit.n_validation, fit.validation_ood_fraction
    );
    println!("{:>4} {:>4} {:>10} {:>8} {:>8}", "t", "P", "log p", "u", "OOD");
    for r in ds.records.iter().filter(|r| r.traj_id == 0) {
        let mut candidates = vec![r.action, PLevel::new(2)?, PLevel::new(9)?];
        candidates.sort();
        candidates.dedup();
        for a in candidates {
            let log_p = model.log_density(&r.state, a)?;
            let reg = model.regularizer_from_log_density(log_p)?;
            let tag = if a == r.action { "*" } else { "" };
            println!("{:>4} {:>3}{tag:1} {:>10.3} {:>8.3} {:>8}", r.t, a.level(), log_p, reg.u, reg.u > 0.0);
        }
    }
    println!("* marks the logged expert action");
    Ok(())
}
