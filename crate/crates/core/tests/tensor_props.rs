mod common;

use channel_moe::tensor::{argmax, cross_entropy, softmax, Matrix, MlpParams, OutputHead};
use common::{fd_worst, linear_probe_loss, near_relu_kink};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random net with perturbed biases, a batch, and probe weights.
fn random_case(dims: &[usize], batch: usize, head: OutputHead, seed: u64) -> (MlpParams, Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParams::init_with_rng(dims, head, &mut rng).unwrap();
    for b in p.biases.iter_mut().flatten() {
        *b = rng.random_range(-0.5..0.5);
    }
    let x = Matrix::from_vec(batch, dims[0], (0..batch * dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let out = *dims.last().unwrap();
    let c = Matrix::from_vec(batch, out, (0..batch * out).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    (p, x, c)
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=3).prop_flat_map(|layers| prop::collection::vec(1usize..=8, layers + 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_head_gradients_match_finite_differences(dims in dims_strategy(), batch in 1usize..=4, seed in any::<u64>()) {
        let (p, x, c) = random_case(&dims, batch, OutputHead::Linear, seed);
        prop_assume!(!near_relu_kink(&p, &x, 1e-3));
        let (_, cache) = p.forward(&x).unwrap();
        let (grads, _) = p.backward(&cache, &c).unwrap();
        let worst = fd_worst(&p, &grads, 1e-5, |q| linear_probe_loss(q, &x, &c));
        prop_assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn softmax_head_gradients_match_finite_differences(dims in dims_strategy(), batch in 1usize..=4, seed in any::<u64>()) {
        prop_assume!(*dims.last().unwrap() >= 2);
        let (p, x, _) = random_case(&dims, batch, OutputHead::Softmax, seed);
        prop_assume!(!near_relu_kink(&p, &x, 1e-3));
        let classes = *dims.last().unwrap();
        let labels: Vec<usize> = (0..batch).map(|i| (seed as usize + i) % classes).collect();
        let (probs, cache) = p.forward(&x).unwrap();
        let (_, g) = cross_entropy(&probs, &labels).unwrap();
        let (grads, _) = p.backward(&cache, &g).unwrap();
        let worst = fd_worst(&p, &grads, 1e-5, |q| cross_entropy(&q.predict(&x).unwrap(), &labels).unwrap().0);
        prop_assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn softmax_rows_are_on_the_simplex(rows in prop::collection::vec(prop::collection::vec(-500.0f64..500.0, 1..10), 1..5)) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let p = softmax(&Matrix::from_rows(&rows).unwrap());
        for r in p.iter_rows() {
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_preserves_argmax_and_shift(row in prop::collection::vec(-50.0f64..50.0, 1..12), shift in -100.0f64..100.0) {
        let p = softmax(&Matrix::row_vector(&row));
        prop_assert_eq!(argmax(p.row(0)), argmax(&row));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let q = softmax(&Matrix::row_vector(&shifted));
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn init_respects_glorot_bound(dims in dims_strategy(), seed in any::<u64>()) {
        let p = MlpParams::init(&dims, OutputHead::Linear, seed).unwrap();
        for (l, w) in p.weights.iter().enumerate() {
            let bound = (6.0 / (dims[l] + dims[l + 1]) as f64).sqrt();
            prop_assert!(w.as_slice().iter().all(|v| v.abs() <= bound));
            prop_assert!(p.biases[l].iter().all(|&b| b == 0.0));
        }
    }
}
