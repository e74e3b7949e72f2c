//! Backprop against central differences on a small softmax MLP, then a few
//! SGD steps on a toy problem.
//!
//! cargo run --release --example mlp_gradcheck

use channel_moe::tensor::{cross_entropy, Matrix, MlpParams, OutputHead};

fn loss(p: &MlpParams, x: &Matrix, y: &[usize]) -> f64 {
    cross_entropy(&p.predict(x).unwrap(), y).unwrap().0
}

fn main() -> channel_moe::Result<()> {
    let mut p = MlpParams::init(&[3, 8, 8, 2], OutputHead::Softmax, 7)?;
    let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.2, -0.3], [-0.7, 0.9, 0.1], [0.0, -2.0, 1.0]])?;
    let y = [0, 1, 1, 0];

    let (probs, cache) = p.forward(&x)?;
    let (_, g) = cross_entropy(&probs, &y)?;
    let (grads, _) = p.backward(&cache, &g)?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..p.num_layers() {
        for i in 0..p.weights[l].as_slice().len() {
            let mut plus = p.clone();
            plus.weights[l].as_mut_slice()[i] += eps;
            let mut minus = p.clone();
            minus.weights[l].as_mut_slice()[i] -= eps;
            let fd = (loss(&plus, &x, &y) - loss(&minus, &x, &y)) / (2.0 * eps);
            let an = grads.weights[l].as_slice()[i];
            worst = worst.max((fd - an).abs() / (fd.abs() + an.abs()).max(1e-6));
        }
    }
    println!("{} parameters, worst relative gradient error {worst:.2e}", p.num_parameters());

    for step in 0..=200 {
        let (probs, cache) = p.forward(&x)?;
        let (l, g) = cross_entropy(&probs, &y)?;
        if step % 50 == 0 {
            println!("step {step:>3}: loss {l:.4}");
        }
        let (grads, _) = p.backward(&cache, &g)?;
        p.sgd_step(&grads, 0.1)?;
    }
    Ok(())
}
