//! Sparse mixture-of-experts library built around ReLU routing with learnable
//! expert-wise scaling, NormSiLU experts, and adaptive sparsity
//! regularization, together with the baselines and ablations needed to study
//! them: TopK/TopP routers, gated experts, a dense SwiGLU FFN, a byte-level
//! language-model training harness, and a sparse CPU inference benchmark.
//!
//! Everything runs framework-free on hand-rolled tensors. Training runs in
//! f32; every backward pass re-runs in f64 under a central-difference oracle
//! (see [`gradcheck`]).

pub mod attention;
pub mod experts;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod regularize;
pub mod rng;
pub mod routing;
pub mod tensor;

use thiserror::Error;

/// Library-level error type.
#[derive(Debug, Error)]
pub enum DecoError {
    #[error(transparent)]
    Numerics(#[from] tensor::NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training aborted at step {step}: {reason}")]
    TrainAbort { step: usize, reason: String },
}
