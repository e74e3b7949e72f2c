//! Dense multilayer perceptrons with explicit reverse-mode gradients.
//!
//! Each layer computes `a_{l+1} = act(a_l W_l^T + b_l)` with `W_l` stored
//! as `(out, in)`. Hidden layers use ReLU. The last layer is affine, and an
//! optional softmax head turns its output into class probabilities.
//!
//! Gradients passed to [`MlpParams::backward`] are always with respect to
//! the final affine output (the logits), regardless of the head, which is
//! what [`cross_entropy`](super::cross_entropy) returns.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::codec;
use crate::error::{Error, Result};
use crate::tensor::{softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    /// `weights[i]` has shape `layer_dims[i + 1] x layer_dims[i]`.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
    pub output_head: OutputHead,
}

/// Values kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    /// Affine output of each layer before its activation.
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn num_layers(&self) -> usize {
        self.pre_activations.len()
    }

    /// The final affine output (the logits for a softmax head).
    pub fn logits(&self) -> &Matrix {
        self.pre_activations.last().expect("cache has at least one layer")
    }

    /// Input to `layer`; layer 0 sees the network input.
    pub fn layer_input(&self, layer: usize) -> &Matrix {
        &self.inputs[layer]
    }
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::InvalidDimension("gradient layer count".into()));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign(b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.as_slice())
            .chain(self.biases.iter().flatten())
            .map(|v| v * v)
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        }
        self.biases.iter_mut().flatten().for_each(|v| *v *= factor);
    }
}

impl MlpParams {
    /// Glorot-uniform weights and zero biases, seeded.
    pub fn init(layer_dims: &[usize], output_head: OutputHead, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(layer_dims, output_head, &mut rng)
    }

    pub fn init_with_rng<R: Rng + ?Sized>(
        layer_dims: &[usize],
        output_head: OutputHead,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation: Activation::Relu,
            output_head,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(layer_dims: &[usize], output_head: OutputHead) -> Result<Self> {
        validate_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights: layer_dims
                .windows(2)
                .map(|p| Matrix::zeros(p[1], p[0]))
                .collect(),
            biases: layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            activation: Activation::Relu,
            output_head,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.input_dim() {
            return Err(Error::InvalidDimension(format!(
                "input has {} columns, network expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers);
        let mut current = input.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = current.matmul_transposed(w)?;
            for i in 0..z.rows() {
                for (v, bias) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bias;
                }
            }
            let next = if l + 1 < layers {
                match self.activation {
                    Activation::Relu => z.map(|v| v.max(0.0)),
                }
            } else {
                z.clone()
            };
            inputs.push(current);
            pre_activations.push(z);
            current = next;
        }
        let output = match self.output_head {
            OutputHead::Linear => current,
            OutputHead::Softmax => softmax(&current),
        };
        Ok((
            output,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward(input)?.0)
    }

    /// Reverse-mode gradients for `grad_logits`, the derivative of the loss
    /// with respect to the final affine output. Also returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<(Gradients, Matrix)> {
        if cache.num_layers() != self.num_layers() {
            return Err(Error::InvalidDimension(format!(
                "cache has {} layers, network has {}",
                cache.num_layers(),
                self.num_layers()
            )));
        }
        if grad_logits.shape() != cache.logits().shape() {
            return Err(Error::InvalidDimension(format!(
                "gradient shape {:?} does not match output {:?}",
                grad_logits.shape(),
                cache.logits().shape()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_logits.clone();
        for l in (0..self.num_layers()).rev() {
            grads.weights[l] = delta.transposed_matmul(&cache.inputs[l])?;
            grads.biases[l] = delta.column_sums();
            let mut upstream = delta.matmul(&self.weights[l])?;
            if l > 0 {
                let pre = &cache.pre_activations[l - 1];
                for (g, &z) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = upstream;
        }
        Ok((grads, delta))
    }

    /// Plain SGD: `p <- p - lr * g`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        self.check_shapes(grads)?;
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.add_scaled(g, -lr)?;
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            for (p, gv) in b.iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
        Ok(())
    }

    fn check_shapes(&self, grads: &Gradients) -> Result<()> {
        let ok = grads.weights.len() == self.weights.len()
            && grads.biases.len() == self.biases.len()
            && self
                .weights
                .iter()
                .zip(&grads.weights)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .biases
                .iter()
                .zip(&grads.biases)
                .all(|(a, b)| a.len() == b.len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidDimension(
                "gradients do not match parameter shapes".into(),
            ))
        }
    }

    /// Writes the parameter block: dims, head, then per layer the row-major
    /// weights followed by the biases, all little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        codec::write_u32(w, self.layer_dims.len() as u32)?;
        for &d in &self.layer_dims {
            codec::write_u32(w, d as u32)?;
        }
        codec::write_u8(
            w,
            match self.output_head {
                OutputHead::Linear => 0,
                OutputHead::Softmax => 1,
            },
        )?;
        for (weights, biases) in self.weights.iter().zip(&self.biases) {
            codec::write_f64s(w, weights.as_slice())?;
            codec::write_f64s(w, biases)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = codec::read_u32(r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let dims = (0..n)
            .map(|_| codec::read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        validate_dims(&dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let output_head = match codec::read_u8(r)? {
            0 => OutputHead::Linear,
            1 => OutputHead::Softmax,
            other => return Err(Error::Checkpoint(format!("unknown output head {other}"))),
        };
        let mut params = Self::zeros(&dims, output_head)?;
        for l in 0..params.num_layers() {
            codec::read_f64s_into(r, params.weights[l].as_mut_slice())?;
            codec::read_f64s_into(r, &mut params.biases[l])?;
        }
        Ok(params)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidDimension(format!(
            "need at least 2 layer dims, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidDimension(format!("zero layer width in {dims:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cross_entropy;

    #[test]
    fn init_is_deterministic() {
        let a = MlpParams::init(&[2, 3], OutputHead::Linear, 7).unwrap();
        let b = MlpParams::init(&[2, 3], OutputHead::Linear, 7).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn init_zero_biases_and_bounded_weights() {
        let p = MlpParams::init(&[4, 4], OutputHead::Linear, 3).unwrap();
        assert!(p.biases.iter().flatten().all(|&b| b == 0.0));

        let p = MlpParams::init(&[2, 2], OutputHead::Linear, 1).unwrap();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(p.weights[0].as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(MlpParams::init(&[], OutputHead::Linear, 0).is_err());
        assert!(MlpParams::init(&[3], OutputHead::Linear, 0).is_err());
        assert!(MlpParams::init(&[3, 0, 2], OutputHead::Linear, 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = MlpParams::zeros(&[3, 5, 2], OutputHead::Linear).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(p.predict(&x).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_logits_softmax_is_uniform() {
        let p = MlpParams::zeros(&[3, 4], OutputHead::Softmax).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(p.predict(&x).unwrap().as_slice(), &[0.25; 4]);
    }

    #[test]
    fn single_affine_unit() {
        let mut p = MlpParams::zeros(&[1, 1], OutputHead::Linear).unwrap();
        p.weights[0][(0, 0)] = 2.0;
        p.biases[0][0] = 1.0;
        let out = p.predict(&Matrix::row_vector(&[3.0])).unwrap();
        assert_eq!(out.as_slice(), &[7.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = MlpParams::zeros(&[3, 2], OutputHead::Linear).unwrap();
        assert!(p.forward(&Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = MlpParams::init(&[3, 4, 2], OutputHead::Linear, 5).unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.1, 0.8], [1.0, 2.0, -1.0]]).unwrap();
        let (_, cache) = p.forward(&x).unwrap();
        let (g, gx) = p.backward(&cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.is_zero());
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_weight_gradient_is_outer_product() {
        let p = MlpParams::init(&[3, 2], OutputHead::Linear, 9).unwrap();
        let x = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let g = Matrix::row_vector(&[0.5, -1.0]);
        let (_, cache) = p.forward(&x).unwrap();
        let (grads, _) = p.backward(&cache, &g).unwrap();
        assert_eq!(grads.weights[0], g.transposed_matmul(&x).unwrap());
        assert_eq!(grads.biases[0], vec![0.5, -1.0]);
    }

    #[test]
    fn inactive_relu_blocks_gradient() {
        // Hidden unit pre-activation is -1 for this input, so nothing flows
        // into the first layer.
        let mut p = MlpParams::zeros(&[1, 1, 1], OutputHead::Linear).unwrap();
        p.weights[0][(0, 0)] = -1.0;
        p.weights[1][(0, 0)] = 3.0;
        let (_, cache) = p.forward(&Matrix::row_vector(&[1.0])).unwrap();
        let (g, gx) = p.backward(&cache, &Matrix::row_vector(&[1.0])).unwrap();
        assert_eq!(g.weights[0][(0, 0)], 0.0);
        assert_eq!(g.biases[0][0], 0.0);
        assert_eq!(gx[(0, 0)], 0.0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = MlpParams::zeros(&[1, 1], OutputHead::Linear).unwrap();
        p.weights[0][(0, 0)] = 1.0;
        let mut g = Gradients::zeros_like(&p);
        g.weights[0][(0, 0)] = 2.0;

        let mut unchanged = p.clone();
        unchanged.sgd_step(&g, 0.0).unwrap();
        assert_eq!(unchanged, p);

        p.sgd_step(&g, 0.5).unwrap();
        assert_eq!(p.weights[0][(0, 0)], 0.0);
    }

    #[test]
    fn sgd_descends_quadratic() {
        // loss = w^2 / 2 has gradient w.
        let mut p = MlpParams::zeros(&[1, 1], OutputHead::Linear).unwrap();
        p.weights[0][(0, 0)] = 1.0;
        let mut g = Gradients::zeros_like(&p);
        g.weights[0][(0, 0)] = 1.0;
        p.sgd_step(&g, 0.1).unwrap();
        let w = p.weights[0][(0, 0)];
        assert!((w - 0.9).abs() < 1e-15);
        assert!(w * w / 2.0 < 0.5);
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let mut p = MlpParams::zeros(&[2, 2], OutputHead::Linear).unwrap();
        let other = MlpParams::zeros(&[2, 3], OutputHead::Linear).unwrap();
        assert!(p.sgd_step(&Gradients::zeros_like(&other), 0.1).is_err());
        assert!(p.sgd_step(&Gradients::zeros_like(&p.clone()), -1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = MlpParams::init(&[5, 7, 3], OutputHead::Softmax, 11).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = MlpParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert!(MlpParams::read_from(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn softmax_head_trains_with_cross_entropy() {
        let mut p = MlpParams::init(&[2, 8, 2], OutputHead::Softmax, 4).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]]).unwrap();
        let y = [0, 1, 0, 1];
        let initial = cross_entropy(&p.predict(&x).unwrap(), &y).unwrap().0;
        for _ in 0..200 {
            let (probs, cache) = p.forward(&x).unwrap();
            let (_, g) = cross_entropy(&probs, &y).unwrap();
            let (grads, _) = p.backward(&cache, &g).unwrap();
            p.sgd_step(&grads, 0.5).unwrap();
        }
        let trained = cross_entropy(&p.predict(&x).unwrap(), &y).unwrap().0;
        assert!(trained < initial * 0.2, "{initial} -> {trained}");
    }
}
