use crate::error::Result;
use crate::numerics::ops::{
    add_row_bias, column_sums, matmul, matmul_nt, matmul_nt_acc, matmul_tn, rms_norm_groups,
    rms_norm_groups_backward, silu, silu_grad, softplus, softplus_grad,
};
use crate::numerics::{Scalar, Tensor};

use super::block::{check_input, fetch, finite, BlockGrads, ParamMap, Scan, NORM_EPS};
use super::config::{block_prefix, DeltaActivation, LayerDims};
use super::gla::ALPHA_FLOOR;
use super::scan::{check_heads, zero_heads, Checkpoints, SsmScan};

/// Borrowed view of one Mamba2 block's parameters.
///
/// Per head `h`: `Δ = f(x·W_dt + dt_bias)`, `α = exp(−Δ·A_h)`,
/// `S = α·S + Δ·kᵀv_h`, `o = q·S + D_h·v_h`, and the block output is
/// `Norm(o ⊙ silu(x·W_z))·W_o` summed over heads. `q`, `k` are shared.
pub struct Mamba2Block<'a, T> {
    pub norm: &'a Tensor<T>,
    pub w_v: &'a Tensor<T>,
    pub w_k: &'a Tensor<T>,
    pub w_q: &'a Tensor<T>,
    pub w_dt: &'a Tensor<T>,
    pub dt_bias: &'a Tensor<T>,
    pub a: &'a Tensor<T>,
    pub d_skip: &'a Tensor<T>,
    pub w_z: &'a Tensor<T>,
    pub out_norm: &'a Tensor<T>,
    pub w_o: &'a Tensor<T>,
    pub dims: LayerDims,
    pub activation: DeltaActivation,
    d_model: usize,
}

pub struct Mamba2Cache<T> {
    x: Tensor<T>,
    xn: Tensor<T>,
    inv_in: Vec<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    zdt: Tensor<T>,
    delta: Tensor<T>,
    alpha: Tensor<T>,
    /// Whether the decay was clamped (no gradient flows through it).
    clamped: Vec<bool>,
    zz: Tensor<T>,
    o: Tensor<T>,
    u: Tensor<T>,
    inv_out: Vec<T>,
    un: Tensor<T>,
    ckpt: Checkpoints<T>,
}

struct Projected<T> {
    xn: Tensor<T>,
    inv_in: Vec<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    zdt: Tensor<T>,
    delta: Tensor<T>,
    alpha: Tensor<T>,
    clamped: Vec<bool>,
    zz: Tensor<T>,
}

impl<'a, T: Scalar> Mamba2Block<'a, T> {
    pub fn from_params(
        params: &'a ParamMap<T>,
        layer: usize,
        d_model: usize,
        dims: LayerDims,
        activation: DeltaActivation,
    ) -> Result<Self> {
        let p = block_prefix(layer, "ssm");
        let (d, h, dk, hv) = (d_model, dims.heads, dims.d_key, dims.heads * dims.d_value);
        Ok(Self {
            norm: fetch(params, &p, "norm", &[d])?,
            w_v: fetch(params, &p, "w_v", &[d, hv])?,
            w_k: fetch(params, &p, "w_k", &[d, dk])?,
            w_q: fetch(params, &p, "w_q", &[d, dk])?,
            w_dt: fetch(params, &p, "w_dt", &[d, h])?,
            dt_bias: fetch(params, &p, "dt_bias", &[h])?,
            a: fetch(params, &p, "a", &[h])?,
            d_skip: fetch(params, &p, "d_skip", &[h])?,
            w_z: fetch(params, &p, "w_z", &[d, hv])?,
            out_norm: fetch(params, &p, "out_norm", &[hv])?,
            w_o: fetch(params, &p, "w_o", &[hv, d])?,
            dims,
            activation,
            d_model,
        })
    }

    fn step_size(&self, z: T) -> T {
        match self.activation {
            DeltaActivation::Softplus => softplus(z),
            DeltaActivation::Silu => silu(z),
        }
    }

    fn step_size_grad(&self, z: T) -> T {
        match self.activation {
            DeltaActivation::Softplus => softplus_grad(z),
            DeltaActivation::Silu => silu_grad(z),
        }
    }

    fn project(&self, x: &Tensor<T>) -> Result<Projected<T>> {
        let steps = check_input(x, self.d_model)?;
        let heads = self.dims.heads;
        let (xn, inv_in) = rms_norm_groups(x, self.norm, self.d_model, NORM_EPS)?;
        let v = matmul(&xn, self.w_v)?;
        let k = matmul(&xn, self.w_k)?;
        let q = matmul(&xn, self.w_q)?;
        let mut zdt = matmul(&xn, self.w_dt)?;
        add_row_bias(&mut zdt, self.dt_bias)?;
        let delta = zdt.map(|z| self.step_size(z));
        let mut alpha = Tensor::zeros(&[steps, heads]);
        let mut clamped = vec![false; steps * heads];
        let floor = T::of(ALPHA_FLOOR);
        for (i, (al, &dl)) in alpha.data_mut().iter_mut().zip(delta.data()).enumerate() {
            let raw = (-dl * self.a.data()[i % heads]).exp();
            *al = if raw > T::one() {
                clamped[i] = true;
                T::one()
            } else if raw < floor {
                clamped[i] = true;
                floor
            } else {
                raw
            };
        }
        let zz = matmul(&xn, self.w_z)?;
        Ok(Projected {
            xn,
            inv_in,
            q,
            k,
            v,
            zdt,
            delta,
            alpha,
            clamped,
            zz,
        })
    }

    fn recurrence<'b>(&'b self, p: &'b Projected<T>) -> SsmScan<'b, T> {
        SsmScan {
            q: &p.q,
            k: &p.k,
            v: &p.v,
            alpha: &p.alpha,
            delta: &p.delta,
            d_skip: self.d_skip.data(),
            dims: self.dims,
        }
    }

    fn output(&self, o: &Tensor<T>, zz: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>, Tensor<T>)> {
        let u = o.zip_map(zz, |x, z| x * silu(z))?;
        let (un, inv_out) = rms_norm_groups(&u, self.out_norm, self.dims.d_value, NORM_EPS)?;
        let out = matmul(&un, self.w_o)?;
        Ok((out, u, inv_out, un))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut states = zero_heads(self.dims);
        self.forward_with_state(x, Scan::Step, &mut states)
    }

    pub fn forward_with_state(&self, x: &Tensor<T>, scan: Scan, states: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        check_heads(states, self.dims)?;
        let p = self.project(x)?;
        let rec = self.recurrence(&p);
        let o = match scan {
            Scan::Step => rec.run(states, None),
            Scan::Chunked(c) => rec.run_chunked(states, c),
        };
        let (out, ..) = self.output(&o, &p.zz)?;
        finite(&out, "Mamba2 activations")?;
        Ok(out)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Mamba2Cache<T>)> {
        let p = self.project(x)?;
        let mut states = zero_heads(self.dims);
        let mut ckpt = Vec::new();
        let o = self.recurrence(&p).run(&mut states, Some(&mut ckpt));
        let (out, u, inv_out, un) = self.output(&o, &p.zz)?;
        finite(&out, "Mamba2 activations")?;
        Ok((
            out,
            Mamba2Cache {
                x: x.clone(),
                xn: p.xn,
                inv_in: p.inv_in,
                q: p.q,
                k: p.k,
                v: p.v,
                zdt: p.zdt,
                delta: p.delta,
                alpha: p.alpha,
                clamped: p.clamped,
                zz: p.zz,
                o,
                u,
                inv_out,
                un,
                ckpt,
            },
        ))
    }

    pub fn backward(&self, c: &Mamba2Cache<T>, dout: &Tensor<T>) -> Result<(Tensor<T>, BlockGrads<T>)> {
        let heads = self.dims.heads;
        let dw_o = matmul_tn(&c.un, dout)?;
        let dun = matmul_nt(dout, self.w_o)?;
        let (du, dout_norm) = rms_norm_groups_backward(&c.u, self.out_norm, &c.inv_out, self.dims.d_value, &dun)?;
        let d_o = du.zip_map(&c.zz, |d, z| d * silu(z))?;
        let dzz = du.mul(&c.o)?.zip_map(&c.zz, |d, z| d * silu_grad(z))?;

        let rec = SsmScan {
            q: &c.q,
            k: &c.k,
            v: &c.v,
            alpha: &c.alpha,
            delta: &c.delta,
            d_skip: self.d_skip.data(),
            dims: self.dims,
        };
        let g = rec.backward(&c.ckpt, &d_o);

        // α = exp(−Δ·A)
        let mut ddelta = g.ddelta;
        let mut da = vec![0.0f64; heads];
        for i in 0..ddelta.len() {
            if c.clamped[i] {
                continue;
            }
            let h = i % heads;
            let al = c.alpha.data()[i];
            let dal = g.dalpha.data()[i];
            let a_h = self.a.data()[h];
            ddelta.data_mut()[i] = ddelta.data()[i] - dal * a_h * al;
            da[h] -= (dal * c.delta.data()[i] * al).f64();
        }
        let dzdt = ddelta.zip_map(&c.zdt, |d, z| d * self.step_size_grad(z))?;
        let ddt_bias = column_sums(&dzdt)?;

        let mut dxn = matmul_nt(&g.dv, self.w_v)?;
        matmul_nt_acc(&mut dxn, &g.dk, self.w_k)?;
        matmul_nt_acc(&mut dxn, &g.dq, self.w_q)?;
        matmul_nt_acc(&mut dxn, &dzdt, self.w_dt)?;
        matmul_nt_acc(&mut dxn, &dzz, self.w_z)?;
        let (dx, dnorm) = rms_norm_groups_backward(&c.x, self.norm, &c.inv_in, self.d_model, &dxn)?;

        let grads = vec![
            ("norm", dnorm),
            ("w_v", matmul_tn(&c.xn, &g.dv)?),
            ("w_k", matmul_tn(&c.xn, &g.dk)?),
            ("w_q", matmul_tn(&c.xn, &g.dq)?),
            ("w_dt", matmul_tn(&c.xn, &dzdt)?),
            ("dt_bias", ddt_bias),
            ("a", Tensor::from_vec(&[heads], da.into_iter().map(T::of).collect())?),
            ("d_skip", Tensor::from_vec(&[heads], g.dd_skip)?),
            ("w_z", matmul_tn(&c.xn, &dzz)?),
            ("out_norm", dout_norm),
            ("w_o", dw_o),
        ];
        Ok((dx, grads))
    }
}
