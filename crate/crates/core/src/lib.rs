//! Selective convolution engine.

pub mod autograd;
pub mod conv;
pub mod data;
pub mod detect;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod mask;
pub mod masked;
pub mod params;
pub mod selective;
pub mod spec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvParams, FeatureMatrix, PoolParams, Scalar, Tensor};
