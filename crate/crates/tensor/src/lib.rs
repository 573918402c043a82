//! Dense f64 tensors, a reverse-mode differentiation tape, an Adam optimizer
//! and a small binary checkpoint container.
//!
//! Everything runs on the CPU in 64-bit precision. A [`Graph`] is rebuilt for
//! every forward pass; parameters live in a [`ParamStore`] between passes.

pub mod checkpoint;
mod error;
pub mod graph;
mod kernels;
pub mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamStore};
pub use tensor::Tensor;

/// Uniform initialisation bound `1/sqrt(fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
