//! Dual-branch convolution/self-attention image restoration network.
//!
//! The crate is generic over the scalar type (`f32` or `f64`, see [`Scalar`]);
//! `f32` is the default compute type and `f64` is used for gradient checks.

pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
mod ops;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Stage, Switch};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::{Axis, Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
