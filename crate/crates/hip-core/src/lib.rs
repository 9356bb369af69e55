//! Hierarchical Perceiver: grouped cross-attention blocks arranged in an
//! encoder-decoder hierarchy, with learned positional embeddings trained by
//! masked auto-encoding.
//!
//! Everything runs on a small reverse-mode tensor core ([`numerics`]) that is
//! generic over the scalar type: `f32` is the working precision, `f64` is used
//! for gradient verification.

pub mod attn;
pub mod datasets;
pub mod embed;
pub mod mae;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pgm;
pub mod rng;
pub mod tokenize;
pub mod train;

pub use numerics::{Real, Tape, Tensor, Var};

/// Working-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;

/// Errors surfaced by configuration, IO and training entry points.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
