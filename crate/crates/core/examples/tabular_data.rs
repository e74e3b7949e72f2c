//! Exports the synthetic task to CSV, reads it back as a tabular dataset,
//! and splits and standardizes it.
//!
//! cargo run --release --example tabular_data

use channel_moe::data::{generate_synthetic, load_tabular, split_dataset, SyntheticSpec, DEFAULT_SPLIT};

fn main() -> channel_moe::Result<()> {
    let spec = SyntheticSpec {
        samples_per_class: 50,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec)?;
    let path = std::env::temp_dir().join("channel_moe_synthetic.csv");
    ds.export(&path)?;
    let back = load_tabular(&path)?;
    println!("wrote and reread {} rows of {} features: identical = {}", back.len(), back.input_dim(), back.features == ds.features);

    let splits = split_dataset(&back, DEFAULT_SPLIT, 0)?;
    let (norm, stats) = splits.normalized()?;
    println!("split sizes {} / {} / {}", norm.train.len(), norm.val.len(), norm.test.len());
    println!("first column: train mean {:.3}, std {:.3}", stats.mean[0], stats.std[0]);
    std::fs::remove_file(&path).ok();
    Ok(())
}
