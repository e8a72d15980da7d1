//! Dense tensors, seeded randomness, differentiable primitives and a
//! finite-difference gradient oracle.

mod gradcheck;
pub mod ops;
mod rng;
mod scalar;
mod tensor;

pub use gradcheck::grad_check;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{seeded_normal, seeded_truncated_normal, seeded_uniform, Tensor};
