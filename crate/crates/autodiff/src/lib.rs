//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! The tape is rebuilt on every forward pass. Parameters live outside the
//! tape in a [`ParamSet`] and are attached as leaves each time; gradients are
//! read back per leaf after [`Tape::backward`].

pub mod checkpoint;
mod error;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, IoError, Result};
pub use params::{global_norm, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
