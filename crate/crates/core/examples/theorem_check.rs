//! Checks the model-error bounds on random tabular MDPs, solving every
//! instance exactly.
//!
//! `cargo run --release --example theorem_check [instances] [seed]`

use cormpo::eval::verify_bounds;

fn main() -> cormpo::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().map_err(|e| cormpo::Error::InvalidInput(format!("{s}: {e}"))))
        .collect::<Result<_, _>>()?;
    let n = args.first().copied().unwrap_or(100) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let report = verify_bounds(n, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
