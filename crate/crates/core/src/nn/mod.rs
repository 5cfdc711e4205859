//! Neural-network primitives with forward and backward passes.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod se;

pub use activation::{gelu_scalar, sigmoid_scalar, softmax_value};
pub use conv::{conv2d_value, ConvSpec, Padding};
pub use norm::{layer_norm_value, LAYER_NORM_EPS};
pub use pool::{global_avg_pool_value, simple_gate_value};
pub use se::{SESpec, SeWeights};
