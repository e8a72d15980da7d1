use crate::error::Result;
use crate::numerics::ops::{
    matmul, matmul_nt, matmul_nt_acc, matmul_tn, rms_norm_groups, rms_norm_groups_backward, silu,
    silu_grad,
};
use crate::numerics::{Scalar, Tensor};

use super::block::{check_input, fetch, finite, BlockGrads, ParamMap, NORM_EPS};
use super::config::block_prefix;

/// SiLU-gated feed-forward block: `(silu(x·W_gate) ⊙ x·W_up)·W_down`.
pub struct FfnBlock<'a, T> {
    pub norm: &'a Tensor<T>,
    pub w_gate: &'a Tensor<T>,
    pub w_up: &'a Tensor<T>,
    pub w_down: &'a Tensor<T>,
    d_model: usize,
}

pub struct FfnCache<T> {
    x: Tensor<T>,
    xn: Tensor<T>,
    inv: Vec<T>,
    gate: Tensor<T>,
    up: Tensor<T>,
    hidden: Tensor<T>,
}

impl<'a, T: Scalar> FfnBlock<'a, T> {
    pub fn from_params(params: &'a ParamMap<T>, layer: usize, d_model: usize, hidden: usize) -> Result<Self> {
        let p = block_prefix(layer, "ffn");
        Ok(Self {
            norm: fetch(params, &p, "norm", &[d_model])?,
            w_gate: fetch(params, &p, "w_gate", &[d_model, hidden])?,
            w_up: fetch(params, &p, "w_up", &[d_model, hidden])?,
            w_down: fetch(params, &p, "w_down", &[hidden, d_model])?,
            d_model,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FfnCache<T>)> {
        check_input(x, self.d_model)?;
        let (xn, inv) = rms_norm_groups(x, self.norm, self.d_model, NORM_EPS)?;
        let gate = matmul(&xn, self.w_gate)?;
        let up = matmul(&xn, self.w_up)?;
        let hidden = gate.zip_map(&up, |g, u| silu(g) * u)?;
        let out = matmul(&hidden, self.w_down)?;
        finite(&out, "FFN activations")?;
        Ok((
            out,
            FfnCache {
                x: x.clone(),
                xn,
                inv,
                gate,
                up,
                hidden,
            },
        ))
    }

    pub fn backward(&self, c: &FfnCache<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, BlockGrads<T>)> {
        let dw_down = matmul_tn(&c.hidden, dout)?;
        let dh = matmul_nt(dout, self.w_down)?;
        let dgate = dh.zip_map(&c.up, |d, u| d * u)?.zip_map(&c.gate, |d, g| d * silu_grad(g))?;
        let dup = dh.zip_map(&c.gate, |d, g| d * silu(g))?;
        let mut dxn = matmul_nt(&dgate, self.w_gate)?;
        matmul_nt_acc(&mut dxn, &dup, self.w_up)?;
        let (dx, dnorm) = rms_norm_groups_backward(&c.x, self.norm, &c.inv, self.d_model, &dxn)?;
        Ok((
            dx,
            vec![
                ("norm", dnorm),
                ("w_gate", matmul_tn(&c.xn, &dgate)?),
                ("w_up", matmul_tn(&c.xn, &dup)?),
                ("w_down", dw_down),
            ],
        ))
    }
}
