//! A small, deterministic CPU tensor engine with tape-based reverse-mode
//! automatic differentiation.
//!
//! Every operation is recorded on a [`Graph`] in construction order and
//! [`Graph::backward`] walks that tape once in reverse. The engine is generic
//! over [`Real`] so the same model code runs in `f32` for training and in
//! `f64` for gradient verification.

mod error;
mod graph;
pub mod kernels;
mod ops;
mod real;
mod tensor;

pub use error::TensorError;
pub use graph::{Graph, Var};
pub use ops::BatchStats;
pub use real::Real;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
