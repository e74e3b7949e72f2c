//! Channel draws: Rayleigh gains, the training SNR law, and the effective
//! noise each preset scenario puts on a feature vector.
//!
//! cargo run --release --example analog_channel

use channel_moe::channel::{analog_transmit, sample_rayleigh, sample_snr_db, ChannelConfig, Scenario};
use channel_moe::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> channel_moe::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ChannelConfig::default();
    let n = 100_000;
    let h2 = (0..n).map(|_| sample_rayleigh(&mut rng).powi(2)).sum::<f64>() / n as f64;
    let snr: Vec<f64> = (0..n).map(|_| sample_snr_db(&cfg, &mut rng)).collect();
    let below = snr.iter().filter(|s| **s < 0.0).count() as f64 / n as f64;
    println!("E[h^2] = {h2:.3}; {:.1}% of training SNR draws are below 0 dB", 100.0 * below);

    let power = 1.0;
    let z = Matrix::filled(1, 1000, 1.0);
    for name in ["uniform-good", "heterogeneous", "random-fading"] {
        let sc = Scenario::preset(name).unwrap();
        let draws = sc.draw_all(4, &cfg, power, &mut rng)?;
        let parts: Vec<String> = draws
            .iter()
            .map(|d| {
                let rx = analog_transmit(&z, d.sigma_tilde, &mut rng);
                let mse = rx.as_slice().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / 1000.0;
                format!("sigma~ {:.3} (mse {:.3})", d.sigma_tilde, mse)
            })
            .collect();
        println!("{name:>14}: {}", parts.join(", "));
    }
    Ok(())
}
