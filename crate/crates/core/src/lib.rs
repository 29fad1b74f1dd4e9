//! Domain-adapted sentence encoders for few-shot text classification.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not need to choose.

pub mod adapters;
pub mod autograd;
pub mod data;
pub mod encoder;
pub mod evalharness;
pub mod error;
pub mod hashing;
pub mod head;
pub mod objectives;
pub mod optim;
pub mod pipelines;
pub mod pairgen;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{ParamStore, Tensor};

pub type Encoder32 = encoder::EncoderState<f32>;
pub type Encoder64 = encoder::EncoderState<f64>;
pub type Adapter32 = adapters::AdapterWeights<f32>;
pub type Adapter64 = adapters::AdapterWeights<f64>;
