//! Generates expert trajectories from the synthetic simulator, injects
//! next-state noise, and compares the two datasets.
//!
//! `cargo run --release --example synthetic_data [out.jsonl]`

use cormpo::dataset::{Dataset, DatasetMeta};
use cormpo::domain::{PLevel, N_ACTIONS};
use cormpo::synth::{inject_noise, GeneratorConfig, NoiseConfig, ScriptedExpert, SynthEnv};

fn summary(name: &str, ds: &Dataset) {
    let mut counts = [0usize; N_ACTIONS];
    for r in &ds.records {
        counts[r.action.index()] += 1;
    }
    let mean_r = ds.records.iter().map(|r| r.reward).sum::<f64>() / ds.len() as f64;
    println!("{name}: {} transitions, mean reward {mean_r:.4}", ds.len());
    for (i, c) in counts.iter().enumerate() {
        println!("  P{} {:>6}", PLevel::from_index(i).unwrap().level(), c);
    }
}

fn main() -> cormpo::Result<()> {
    let generator = GeneratorConfig { n_trajectories: 500, seed: 1, ..Default::default() };
    let clean = SynthEnv::new(generator.clone()).generate_dataset(&ScriptedExpert)?;
    let noise = NoiseConfig { seed: 2, ..Default::default() };
    let noisy = inject_noise(&clean, &noise)?;
    summary("clean", &clean);
    summary("noisy", &noisy);
    let touched = clean.records.iter().zip(&noisy.records).filter(|(a, b)| a.next_state != b.next_state).count();
    println!("perturbed next-states: {touched} of {}", clean.len());
    if let Some(path) = std::env::args().nth(1) {
        noisy.write_with_meta(path.as_ref(), &DatasetMeta::describe(&noisy, generator, Some(noise))?)?;
        println!("wrote {path}");
    }
    Ok(())
}
