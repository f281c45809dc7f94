//! Stateful cross-layer vision modulation for a miniature vision transformer.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod inspect;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod scvm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor, TensorError};
