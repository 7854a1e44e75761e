//! Particle-cloud transformer benchmark for jet representation learning.
// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod augment;
pub mod autodiff;
mod codec;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod jetdata;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations, used by the runner and checkpoints.
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Checkpoint64 = encoder::Checkpoint<f64>;
pub type JetBatch64 = jetdata::JetBatch<f64>;

/// Single-precision instantiations.
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type JetBatch32 = jetdata::JetBatch<f32>;
