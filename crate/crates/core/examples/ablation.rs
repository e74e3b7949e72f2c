//! Sweeps the number of experts from a configuration file and prints the
//! results table plus the mean channel-aware gain per K.
//!
//! cargo run --release --example ablation -- configs/ablation.toml

use std::path::PathBuf;

use channel_moe::experiment::{cmd_ablate, mean_gain_by_k, render_table, ExperimentConfig};

fn main() -> channel_moe::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from);
    let out = std::env::temp_dir().join("channel_moe_ablation");
    let cfg = ExperimentConfig::load(path.as_deref(), &[], 0, &out)?;
    let rows = cmd_ablate(&cfg)?;
    print!("{}", render_table(&rows));
    for (k, g) in mean_gain_by_k(&rows) {
        println!("K = {k:>2}: channel-aware minus naive {:+.1} points", 100.0 * g);
    }
    println!("results in {}", out.display());
    Ok(())
}
