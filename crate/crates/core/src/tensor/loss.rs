use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean negative log-likelihood of `labels` under `probs`.
///
/// The returned gradient is with respect to the logits that produced `probs`
/// through a softmax: `(probs - one_hot) / B`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = probs.shape();
    if labels.len() != batch {
        return Err(Error::InvalidDimension(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidBatch("empty batch".into()));
    }
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = probs.scale(inv_b);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidLabel { label, classes });
        }
        loss -= probs[(i, label)].max(PROB_FLOOR).ln();
        grad[(i, label)] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> Vec<f64> {
        softmax(&Matrix::row_vector(values)).into_vec()
    }

    #[test]
    fn softmax_examples() {
        for p in row(&[0.0, 0.0, 0.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let sat = row(&[1000.0, 0.0]);
        assert!((sat[0] - 1.0).abs() < 1e-12 && sat[1] < 1e-12);
        let exact = row(&[1.0f64.ln(), 3.0f64.ln()]);
        assert!((exact[0] - 0.25).abs() < 1e-15);
        assert!((exact[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let p = row(&[1e6, -1e6, 5e5]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::filled(1, 10, 0.1);
        let (loss, _) = cross_entropy(&uniform, &[3]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let onehot = Matrix::row_vector(&[0.0, 1.0, 0.0]);
        assert_eq!(cross_entropy(&onehot, &[1]).unwrap().0, 0.0);

        let p = Matrix::row_vector(&[0.25, 0.75]);
        let (loss, grad) = cross_entropy(&p, &[1]).unwrap();
        assert!((loss - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert_eq!(grad.as_slice(), &[0.25, -0.25]);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = Matrix::row_vector(&[1.0, 0.0]);
        let (loss, _) = cross_entropy(&p, &[1]).unwrap();
        assert!((loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let p = Matrix::row_vector(&[0.5, 0.5]);
        assert!(matches!(
            cross_entropy(&p, &[2]),
            Err(Error::InvalidLabel { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[1.0, 0.0, 0.0]), 0);
    }
}
