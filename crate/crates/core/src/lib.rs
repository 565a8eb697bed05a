//! Conditional multimodal generation with regularized normalized
//! diversification.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! diversity and adversarial objectives ([`losses`]), generator and
//! discriminator builders ([`models`]), two benchmarks ([`synthetic`] and
//! [`sprites`]), evaluation metrics ([`eval`]) and the training harness
//! ([`harness`]).

pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod models;
pub mod rng;
pub mod sprites;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Parameter, Tensor, Var};
