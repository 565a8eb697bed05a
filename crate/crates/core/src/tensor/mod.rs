//! Minimal reverse-mode autodiff over dense `f64` tensors.

mod graph;
mod kernels;
mod value;

pub mod gradcheck;
pub mod param;

pub use graph::{Graph, Var};
pub use param::{spectral_normalize, spectral_normalize_var, AdamConfig, ParamStore, Parameter};
pub use value::Tensor;

#[cfg(test)]
mod tests;
