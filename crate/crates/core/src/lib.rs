//! Recurrent language-model laboratory: gated linear attention and Mamba2
//! layers, post-training state expansion of trained checkpoints, a
//! train / expand / post-train pipeline and synthetic recall benchmarks.
//!
//! All numerics are generic over [`Scalar`]; the concrete aliases below fix
//! the 64-bit compute type used by training and the pipeline.

pub mod arch;
pub mod checkpoint;
mod error;
pub mod numerics;
pub mod statex;
pub mod tasks;
pub mod training;

pub use arch::{Family, LayerDims, ModelConfig, RecurrentState};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use numerics::{Rng, Scalar, Tensor};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Model64 = arch::Model<f64>;
pub type Model32 = arch::Model<f32>;
pub type ParamMap64 = arch::ParamMap<f64>;
pub type State64 = arch::RecurrentState<f64>;
