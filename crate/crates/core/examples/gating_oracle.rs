//! Compares the trained channel-aware gate of a two-expert model with the
//! best fixed weighting found by grid search over the simplex, at a few
//! noise levels.
//!
//! cargo run --release --example gating_oracle

use channel_moe::channel::snr_to_sigma_tilde;
use channel_moe::data::{generate_synthetic, split_dataset, SyntheticSpec, DEFAULT_SPLIT};
use channel_moe::tensor::{cross_entropy, softmax, Matrix};
use channel_moe::trainer::{train_two_stage, TrainConfig};
use channel_moe::{MoeDims, MoeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Mean cross-entropy of the `pi`-weighted mixture over shared noise draws.
fn mixture_loss(m: &MoeModel, z: &[f64], sigma: [f64; 2], y: usize, noise: &[Vec<Vec<f64>>], pi: [f64; 2]) -> f64 {
    noise
        .iter()
        .map(|draw| {
            let mut mixed = vec![0.0; m.num_classes()];
            for k in 0..2 {
                let zk: Vec<f64> = z.iter().zip(&draw[k]).map(|(a, n)| a + sigma[k] * n).collect();
                let logits = m.experts[k].predict(&Matrix::row_vector(&zk)).unwrap();
                mixed.iter_mut().zip(logits.row(0)).for_each(|(v, l)| *v += pi[k] * l);
            }
            cross_entropy(&softmax(&Matrix::row_vector(&mixed)), &[y]).unwrap().0
        })
        .sum::<f64>()
        / noise.len() as f64
}

fn main() -> channel_moe::Result<()> {
    let spec = SyntheticSpec {
        samples_per_class: 1000,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let (splits, _) = split_dataset(&generate_synthetic(&spec)?, DEFAULT_SPLIT, 11)?.normalized()?;
    let cfg = TrainConfig {
        seed: 11,
        lambda: 0.3,
        lambda_stage2: Some(0.01),
        epochs_stage2: 90,
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let m = train_two_stage(&MoeDims::desk(16, 2, 8), None, &splits, &cfg)?.model;

    let x = splits.test.features.select_rows(&[0]);
    let y = splits.test.labels[0];
    let z = m.extract_features(&x)?.row(0).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Vec<Vec<Vec<f64>>> = (0..1000)
        .map(|_| (0..2).map(|_| (0..z.len()).map(|_| StandardNormal.sample(&mut rng)).collect()).collect())
        .collect();

    println!("{:>12}  {:>8}  {:>8}  {:>10}  {:>10}", "snr (dB)", "gate w0", "best w0", "gate loss", "best loss");
    for snr in [[40.0, -10.0], [-10.0, 40.0], [0.0, 0.0], [-5.0, 5.0], [5.0, -5.0]] {
        let sigma = snr.map(|db| snr_to_sigma_tilde(db, m.feature_power).unwrap());
        let (best_pi, best) = (0..=100)
            .map(|j| {
                let p = j as f64 / 100.0;
                (p, mixture_loss(&m, &z, sigma, y, &noise, [p, 1.0 - p]))
            })
            .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let g = m.gate_channel_aware(&Matrix::row_vector(&z), &Matrix::row_vector(&sigma))?;
        let gate = mixture_loss(&m, &z, sigma, y, &noise, [g[(0, 0)], g[(0, 1)]]);
        println!(
            "{:>5}/{:<6}  {:>8.3}  {:>8.2}  {gate:>10.4}  {best:>10.4}",
            snr[0], snr[1], g[(0, 0)], best_pi
        );
    }
    Ok(())
}
