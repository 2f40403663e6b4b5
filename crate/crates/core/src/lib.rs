//! Generative ranking engine with action-oriented and interleaved sequence
//! organizations.
//!
//! The numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete instantiations.

pub mod datagen;
pub mod error;
pub mod evalbench;
pub mod nncore;
mod scalar;
pub mod seqbuild;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type ModelF32 = nncore::Model<f32>;
pub type ModelF64 = nncore::Model<f64>;
pub type ModelParamsF32 = nncore::ModelParams<f32>;
pub type ModelParamsF64 = nncore::ModelParams<f64>;
pub type KvCacheF32 = nncore::KvCache<f32>;
pub type KvCacheF64 = nncore::KvCache<f64>;
