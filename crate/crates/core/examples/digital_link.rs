//! One feature vector through quantization, Huffman coding, the rate-1/2
//! convolutional code, and 16-QAM at several SNRs.
//!
//! cargo run --release --example digital_link

use channel_moe::digital::{digital_transmit_detailed, DigitalLinkConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> channel_moe::Result<()> {
    let cfg = DigitalLinkConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
    println!("{:>6}  {:>11}  {:>13}  {:>9}", "snr_db", "coded flips", "source errors", "mse");
    for snr in [0.0, 5.0, 8.0, 10.0, 15.0, 30.0] {
        let t = digital_transmit_detailed(&z, 1.0, snr, &cfg, &mut rng)?;
        let mse = z.iter().zip(&t.z_recon).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.len() as f64;
        println!(
            "{snr:>6}  {:>5}/{:<5}  {:>6}/{:<6}  {mse:>9.2e}",
            t.channel_bit_errors, t.coded_bits, t.decoded_bit_errors, t.source_bits
        );
    }
    Ok(())
}
