//! Initial values for every parameter tensor, shared by fresh models and by
//! reinitialization after state expansion.

use crate::numerics::ops::softplus_inverse;
use crate::numerics::{seeded_truncated_normal, seeded_uniform, Rng, Scalar, Tensor};

/// Standard deviation of projection and embedding weights.
pub const INIT_STD: f64 = 0.02;
/// Range of the Mamba2 decay rates `A_h`.
pub const A_INIT_RANGE: (f64, f64) = (1.0, 16.0);
/// Range of the initial Mamba2 step size, sampled log-uniformly.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Draws the initial value of the tensor `name`. Each tensor reads its own
/// random stream, so the result depends only on `(seed, name, shape)`.
pub fn init_tensor<T: Scalar>(name: &str, shape: &[usize], root: &Rng) -> Tensor<T> {
    let mut rng = root.stream(name);
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "norm" | "out_norm" | "final_norm" | "d_skip" => Tensor::ones(shape),
        "b_r" => Tensor::zeros(shape),
        "k_shift" => Tensor::ones(shape),
        "a" => seeded_uniform(&mut rng, shape, A_INIT_RANGE.0, A_INIT_RANGE.1),
        "dt_bias" => {
            let (lo, hi) = (DT_INIT_RANGE.0.ln(), DT_INIT_RANGE.1.ln());
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::of(softplus_inverse(rng.uniform_range(lo, hi).exp())))
                .collect();
            Tensor::from_vec(shape, data).expect("shape matches count")
        }
        _ => seeded_truncated_normal(&mut rng, shape, INIT_STD).expect("positive std"),
    }
}
