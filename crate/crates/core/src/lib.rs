//! Axis-decoupled masked autoencoders for spatiotemporal series.

pub mod container;
pub mod data;
pub mod embedding;
pub mod error;
pub mod forecast;
pub mod harness;
pub mod mae;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
