use crate::error::Result;
use crate::numerics::ops::{
    add_row_bias, column_sums, log_sigmoid, matmul, matmul_nt, matmul_nt_acc, matmul_tn,
    rms_norm_groups, rms_norm_groups_backward, sigmoid, silu, silu_grad,
};
use crate::numerics::{Scalar, Tensor};

use super::block::{check_input, fetch, finite, BlockGrads, ParamMap, Scan, NORM_EPS};
use super::config::{block_prefix, LayerDims};
use super::scan::{check_heads, zero_heads, Checkpoints, GlaScan};

/// `α = sigmoid(x·W_α)^(1/τ)`; a large τ keeps the decay close to 1.
pub const ALPHA_TEMPERATURE: f64 = 16.0;
/// Lower bound on any decay factor.
pub const ALPHA_FLOOR: f64 = 1e-6;

/// Borrowed view of one GLA block's parameters.
pub struct GlaBlock<'a, T> {
    pub norm: &'a Tensor<T>,
    pub w_q: &'a Tensor<T>,
    pub w_k: &'a Tensor<T>,
    /// Per-channel weight of the previous token's normalized input on the
    /// key path; absent unless the model enables `key_shift`.
    pub k_shift: Option<&'a Tensor<T>>,
    pub w_alpha: &'a Tensor<T>,
    pub w_v: &'a Tensor<T>,
    pub w_r: &'a Tensor<T>,
    pub b_r: &'a Tensor<T>,
    pub out_norm: &'a Tensor<T>,
    pub w_o: &'a Tensor<T>,
    pub dims: LayerDims,
    d_model: usize,
}

pub struct GlaCache<T> {
    x: Tensor<T>,
    xn: Tensor<T>,
    xk: Option<Tensor<T>>,
    inv_in: Vec<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    za: Tensor<T>,
    alpha: Tensor<T>,
    zr: Tensor<T>,
    y_raw: Tensor<T>,
    inv_out: Vec<T>,
    o: Tensor<T>,
    r: Tensor<T>,
    ckpt: Checkpoints<T>,
}

struct Projected<T> {
    xn: Tensor<T>,
    xk: Option<Tensor<T>>,
    inv_in: Vec<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    za: Tensor<T>,
    alpha: Tensor<T>,
    zr: Tensor<T>,
}

fn decay<T: Scalar>(za: T) -> T {
    let a = (log_sigmoid(za).f64() / ALPHA_TEMPERATURE).exp();
    T::of(a.max(ALPHA_FLOOR))
}

impl<'a, T: Scalar> GlaBlock<'a, T> {
    pub fn from_params(
        params: &'a ParamMap<T>,
        layer: usize,
        d_model: usize,
        dims: LayerDims,
    ) -> Result<Self> {
        let p = block_prefix(layer, "gla");
        let (d, hk, hv) = (d_model, dims.heads * dims.d_key, dims.heads * dims.d_value);
        Ok(Self {
            norm: fetch(params, &p, "norm", &[d])?,
            w_q: fetch(params, &p, "w_q", &[d, hk])?,
            w_k: fetch(params, &p, "w_k", &[d, hk])?,
            k_shift: match params.contains_key(&format!("{p}k_shift")) {
                true => Some(fetch(params, &p, "k_shift", &[d])?),
                false => None,
            },
            w_alpha: fetch(params, &p, "w_alpha", &[d, hk])?,
            w_v: fetch(params, &p, "w_v", &[d, hv])?,
            w_r: fetch(params, &p, "w_r", &[d, hv])?,
            b_r: fetch(params, &p, "b_r", &[hv])?,
            out_norm: fetch(params, &p, "out_norm", &[hv])?,
            w_o: fetch(params, &p, "w_o", &[hv, d])?,
            dims,
            d_model,
        })
    }

    /// `prev` is the normalized input of the token before `x[0]`; empty means
    /// zeros. It is replaced by the last row of this call's normalized input.
    fn project(&self, x: &Tensor<T>, prev: &mut Vec<T>) -> Result<Projected<T>> {
        check_input(x, self.d_model)?;
        let (xn, inv_in) = rms_norm_groups(x, self.norm, self.d_model, NORM_EPS)?;
        let q = matmul(&xn, self.w_q)?;
        let xk = match self.k_shift {
            Some(mu) => {
                let d = self.d_model;
                if !prev.is_empty() && prev.len() != d {
                    return Err(crate::error::Error::shape(format!(
                        "carried input has {} channels, expected {d}",
                        prev.len()
                    )));
                }
                let mut xk = xn.clone();
                for t in 0..xn.shape()[0] {
                    let before = match t {
                        0 if prev.is_empty() => continue,
                        0 => &prev[..],
                        _ => xn.row(t - 1),
                    };
                    for ((o, &m), &p) in xk.row_mut(t).iter_mut().zip(mu.data()).zip(before) {
                        *o = *o + m * p;
                    }
                }
                *prev = xn.row(xn.shape()[0] - 1).to_vec();
                Some(xk)
            }
            None => None,
        };
        let k = matmul(xk.as_ref().unwrap_or(&xn), self.w_k)?;
        let v = matmul(&xn, self.w_v)?;
        let za = matmul(&xn, self.w_alpha)?;
        let alpha = za.map(decay);
        let mut zr = matmul(&xn, self.w_r)?;
        add_row_bias(&mut zr, self.b_r)?;
        Ok(Projected {
            xn,
            xk,
            inv_in,
            q,
            k,
            v,
            za,
            alpha,
            zr,
        })
    }

    fn output(&self, y_raw: &Tensor<T>, zr: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Tensor<T>, Tensor<T>)> {
        let (o, inv_out) = rms_norm_groups(y_raw, self.out_norm, self.dims.d_value, NORM_EPS)?;
        let r = zr.map(silu);
        let out = matmul(&o.mul(&r)?, self.w_o)?;
        Ok((out, inv_out, o, r))
    }

    /// Block output (without the residual) from a zero initial state.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut states = zero_heads(self.dims);
        self.forward_with_state(x, Scan::Step, &mut states, &mut Vec::new())
    }

    /// Block output continuing from `states` and the carried normalized
    /// input `prev` (see `key_shift`), both advanced in place.
    pub fn forward_with_state(
        &self,
        x: &Tensor<T>,
        scan: Scan,
        states: &mut [Tensor<T>],
        prev: &mut Vec<T>,
    ) -> Result<Tensor<T>> {
        check_heads(states, self.dims)?;
        let p = self.project(x, prev)?;
        let rec = GlaScan {
            q: &p.q,
            k: &p.k,
            v: &p.v,
            alpha: &p.alpha,
            dims: self.dims,
        };
        let y_raw = match scan {
            Scan::Step => rec.run(states, None),
            Scan::Chunked(c) => rec.run_chunked(states, c),
        };
        let (out, ..) = self.output(&y_raw, &p.zr)?;
        finite(&out, "GLA activations")?;
        Ok(out)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GlaCache<T>)> {
        let p = self.project(x, &mut Vec::new())?;
        let mut states = zero_heads(self.dims);
        let mut ckpt = Vec::new();
        let y_raw = GlaScan {
            q: &p.q,
            k: &p.k,
            v: &p.v,
            alpha: &p.alpha,
            dims: self.dims,
        }
        .run(&mut states, Some(&mut ckpt));
        let (out, inv_out, o, r) = self.output(&y_raw, &p.zr)?;
        finite(&out, "GLA activations")?;
        let cache = GlaCache {
            x: x.clone(),
            xn: p.xn,
            xk: p.xk,
            inv_in: p.inv_in,
            q: p.q,
            k: p.k,
            v: p.v,
            za: p.za,
            alpha: p.alpha,
            zr: p.zr,
            y_raw,
            inv_out,
            o,
            r,
            ckpt,
        };
        Ok((out, cache))
    }

    /// Input gradient and parameter gradients given the output gradient.
    pub fn backward(&self, c: &GlaCache<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, BlockGrads<T>)> {
        let g = c.o.mul(&c.r)?;
        let dw_o = matmul_tn(&g, dout)?;
        let dg = matmul_nt(dout, self.w_o)?;
        let dr = dg.mul(&c.o)?;
        let d_o = dg.mul(&c.r)?;
        let dzr = dr.zip_map(&c.zr, |d, z| d * silu_grad(z))?;
        let db_r = column_sums(&dzr)?;
        let (dy_raw, dout_norm) =
            rms_norm_groups_backward(&c.y_raw, self.out_norm, &c.inv_out, self.dims.d_value, &d_o)?;

        let (dq, dk, dv, dalpha) = GlaScan {
            q: &c.q,
            k: &c.k,
            v: &c.v,
            alpha: &c.alpha,
            dims: self.dims,
        }
        .backward(&c.ckpt, &dy_raw);

        let floor = T::of(ALPHA_FLOOR);
        let tau = T::of(ALPHA_TEMPERATURE);
        let mut dza = dalpha;
        for ((d, &a), &z) in dza.data_mut().iter_mut().zip(c.alpha.data()).zip(c.za.data()) {
            *d = if a <= floor {
                T::zero()
            } else {
                *d * a * (T::one() - sigmoid(z)) / tau
            };
        }

        let mut dxn = matmul_nt(&dq, self.w_q)?;
        let mut dshift = None;
        match (self.k_shift, &c.xk) {
            (Some(mu), Some(_)) => {
                let dxk = matmul_nt(&dk, self.w_k)?;
                dxn.add_assign(&dxk)?;
                let mut dmu = vec![T::zero(); self.d_model];
                for t in 1..dxk.shape()[0] {
                    let (g, before) = (dxk.row(t), c.xn.row(t - 1));
                    for (i, dm) in dmu.iter_mut().enumerate() {
                        *dm = *dm + g[i] * before[i];
                    }
                    for ((o, &m), &gi) in dxn.row_mut(t - 1).iter_mut().zip(mu.data()).zip(g) {
                        *o = *o + m * gi;
                    }
                }
                dshift = Some(Tensor::from_vec(&[self.d_model], dmu)?);
            }
            _ => matmul_nt_acc(&mut dxn, &dk, self.w_k)?,
        }
        matmul_nt_acc(&mut dxn, &dv, self.w_v)?;
        matmul_nt_acc(&mut dxn, &dza, self.w_alpha)?;
        matmul_nt_acc(&mut dxn, &dzr, self.w_r)?;
        let (dx, dnorm) = rms_norm_groups_backward(&c.x, self.norm, &c.inv_in, self.d_model, &dxn)?;

        let mut grads = vec![
            ("norm", dnorm),
            ("w_q", matmul_tn(&c.xn, &dq)?),
            ("w_k", matmul_tn(c.xk.as_ref().unwrap_or(&c.xn), &dk)?),
            ("w_v", matmul_tn(&c.xn, &dv)?),
            ("w_alpha", matmul_tn(&c.xn, &dza)?),
            ("w_r", matmul_tn(&c.xn, &dzr)?),
            ("b_r", db_r),
            ("out_norm", dout_norm),
            ("w_o", dw_o),
        ];
        if let Some(g) = dshift {
            grads.push(("k_shift", g));
        }
        Ok((dx, grads))
    }
}
