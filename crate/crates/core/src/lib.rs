//! Tunable convolutions: kernel banks mixed by user-facing parameters `ω`,
//! trained with a multi-loss weighted by the same `ω`.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient checks).

pub mod analysis;
pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod exec;
pub mod layers;
pub mod objectives;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = layers::Model<f32>;
pub type Model64 = layers::Model<f64>;
