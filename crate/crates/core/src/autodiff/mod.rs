//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! [`Tensor`] holds plain values, [`Tape`] records operations on them and
//! [`Var`] is a handle to a recorded value. A fresh tape is built for every
//! forward pass; learnable tensors live in a [`ParamStore`] and are bound to
//! the tape at the start of each pass.

pub mod gradcheck;
mod nn;
mod params;
mod tape;
mod tensor;

pub use nn::{drop_path, dropout_mask, geglu, linear};
pub use params::{Bound, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tape::{gelu, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
