//! Minimal deterministic dense-network engine.

mod loss;
mod matrix;
mod mlp;

pub use loss::{argmax, cross_entropy, softmax, softmax_in_place, PROB_FLOOR};
pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use mlp::{Activation, ForwardCache, Gradients, MlpParams, OutputHead};
