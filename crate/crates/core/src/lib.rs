//! Channel-aware mixture-of-experts inference over noisy links.
//!
//! A server extracts features with a shared backbone, a gating network picks
//! an expert, and the features travel to that expert over an analog or
//! digital wireless link. The channel-aware gate sees each expert's effective
//! noise level and learns to avoid degraded links.

mod codec;
pub mod channel;
pub mod data;
pub mod digital;
pub mod error;
pub mod experiment;
pub mod moe;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use moe::{GateOutput, GatingMode, MoeDims, MoeModel, SigmaVector, Stage};
