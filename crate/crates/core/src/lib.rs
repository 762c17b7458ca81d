//! Domain-conditioned meta-contrastive training on a small reverse-mode
//! autodiff engine.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix it to `f64`, which is what the trainer, the file formats
//! and the gradient checks use.

// `!(x > 0)` is how validation rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod meta;
pub mod model;
pub mod optim;
pub mod persist;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use autodiff::{NodeId, OpKind, ParamNodes};

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParamSet = autodiff::ParamSet<f64>;
