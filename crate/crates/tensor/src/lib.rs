//! Dense f64 tensors with a recording tape for reverse-mode differentiation.
//!
//! Values flow through a [`Tape`] as [`Var`] handles. Trainable parameters live
//! in a [`ParamStore`]; a [`Graph`] binds a tape to a store for one forward
//! pass, and [`Tape::backward`] accumulates gradients back into the store.

mod error;
mod gradcheck;
mod graph;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::gradient_check;
pub use graph::Graph;
pub use params::{Init, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
