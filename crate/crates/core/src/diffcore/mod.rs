//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with the values the reverse pass needs. [`Tape::backward`] walks the
//! records in exact reverse creation order and returns one gradient per
//! registered parameter.

mod mlp;
mod params;
mod tape;
mod tensor;

pub use mlp::Mlp;
pub use params::{Checkpoint, ParamRecord, ParamSet, Sgd};
pub use tape::{param_key, sigmoid, Grads, Tape, Var};
pub use tensor::Tensor2;
