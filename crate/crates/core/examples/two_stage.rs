//! Trains a channel-aware MoE on the synthetic task and compares naive and
//! channel-aware routing when half the links are bad.
//!
//! cargo run --release --example two_stage

use channel_moe::channel::Scenario;
use channel_moe::data::{generate_synthetic, split_dataset, SyntheticSpec, DEFAULT_SPLIT};
use channel_moe::trainer::{evaluate, train_two_stage, EvalContext, TrainConfig, TransportKind};
use channel_moe::{GatingMode, MoeDims};

fn main() -> channel_moe::Result<()> {
    let spec = SyntheticSpec {
        samples_per_class: 1000,
        ..SyntheticSpec::default()
    };
    let (splits, _) = split_dataset(&generate_synthetic(&spec)?, DEFAULT_SPLIT, 0)?.normalized()?;
    let cfg = TrainConfig {
        lambda: 0.3,
        lambda_stage2: Some(0.01),
        epochs_stage2: 90,
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    // 4 specialists trained under ideal links, each cloned twice before stage 2
    let run = train_two_stage(&MoeDims::desk(16, 8, 8), Some(4), &splits, &cfg)?;

    let ctx = EvalContext::default();
    let ideal = Scenario::ideal();
    let base = evaluate(&run.stage1, &splits.test, TransportKind::Ideal, &ideal, GatingMode::Naive, &ctx)?;
    println!("stage-1 accuracy, ideal links: {:.3}", base.accuracy);

    let het = Scenario::preset("heterogeneous").unwrap();
    for mode in [GatingMode::Naive, GatingMode::ChannelAware] {
        let r = evaluate(&run.model, &splits.test, TransportKind::Analog, &het, mode, &ctx)?;
        let bad: f64 = r.routing_fraction.iter().step_by(2).sum();
        println!("{:>13}: accuracy {:.3}, traffic on -10 dB experts {:.2}", mode.name(), r.accuracy, bad);
    }
    Ok(())
}
