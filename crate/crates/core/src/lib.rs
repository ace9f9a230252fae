//! Desk-scale autoregressive adversarial post-training of a block-causal
//! video transformer: a one-forward-pass-per-frame streaming generator
//! trained on a procedural camera-controlled world.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rollout;
pub mod stages;
pub mod stream;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod video;
pub mod world;

pub use autograd::{Grads, Graph, Var};
pub use error::{AaptError, Result};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::ParamSet;
pub use tensor::Tensor;
