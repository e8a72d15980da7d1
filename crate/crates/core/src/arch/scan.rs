//! Linear recurrences over per-head `d_k × d_v` states.
//!
//! GLA:    `S_t = diag(α_t)·S_{t-1} + k_tᵀ v_t`,   `y_t = q_t·S_t`
//! Mamba2: `S_t = α_t·S_{t-1} + Δ_t·k_tᵀ v_t`,     `y_t = q_t·S_t + D·v_t`
//!
//! The step form is the reference; the chunked form evaluates blocks of
//! steps with dense products and agrees up to reassociation. Backward passes
//! replay each block from a stored state instead of keeping every `S_t`.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::config::LayerDims;

/// States are stored for the backward pass once every this many steps.
pub const CHECKPOINT_EVERY: usize = 16;

/// Per-layer, per-head recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub layers: Vec<Vec<Tensor<T>>>,
    /// Last normalized mixer input per layer, read by the GLA key shift.
    /// Empty until a layer that uses it has seen a token.
    pub carry: Vec<Vec<T>>,
}

impl<T: Scalar> RecurrentState<T> {
    /// Zero state for each layer's head layout.
    pub fn zeros(dims: impl IntoIterator<Item = LayerDims>) -> Self {
        let layers: Vec<_> = dims.into_iter().map(zero_heads).collect();
        Self {
            carry: vec![Vec::new(); layers.len()],
            layers,
        }
    }

    /// Scalars in the matrix states; the key-shift carry is not counted.
    pub fn size(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| l.iter().map(|s| s.len() as u64))
            .sum()
    }
}

pub fn zero_heads<T: Scalar>(dims: LayerDims) -> Vec<Tensor<T>> {
    (0..dims.heads)
        .map(|_| Tensor::zeros(&[dims.d_key, dims.d_value]))
        .collect()
}

pub(crate) fn check_heads<T: Scalar>(states: &[Tensor<T>], dims: LayerDims) -> Result<()> {
    if states.len() != dims.heads
        || states
            .iter()
            .any(|s| s.shape() != [dims.d_key, dims.d_value])
    {
        return Err(Error::shape(format!(
            "state has {} heads, layer expects {} of {}×{}",
            states.len(),
            dims.heads,
            dims.d_key,
            dims.d_value
        )));
    }
    Ok(())
}

/// One GLA head step on explicit tensors.
pub fn gla_head_step<T: Scalar>(
    s_prev: &Tensor<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    alpha: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let (dk, dv) = s_prev.dims2()?;
    if q.len() != dk || k.len() != dk || alpha.len() != dk || v.len() != dv {
        return Err(Error::shape(format!(
            "state {dk}×{dv} with q {}, k {}, v {}, alpha {}",
            q.len(),
            k.len(),
            v.len(),
            alpha.len()
        )));
    }
    let mut s = s_prev.clone();
    let mut y = vec![T::zero(); dv];
    gla_step(s.data_mut(), q, k, v, alpha, &mut y);
    Ok((s, y))
}

#[inline]
fn gla_step<T: Scalar>(s: &mut [T], q: &[T], k: &[T], v: &[T], alpha: &[T], y: &mut [T]) {
    let dv = v.len();
    for (i, row) in s.chunks_exact_mut(dv).enumerate() {
        let (a, ki) = (alpha[i], k[i]);
        for (sij, &vj) in row.iter_mut().zip(v) {
            *sij = a * *sij + ki * vj;
        }
    }
    query(s, q, y);
}

#[inline]
fn query<T: Scalar>(s: &[T], q: &[T], y: &mut [T]) {
    let dv = y.len();
    y.iter_mut().for_each(|x| *x = T::zero());
    for (row, &qi) in s.chunks_exact(dv).zip(q) {
        for (yj, &sij) in y.iter_mut().zip(row) {
            *yj = *yj + qi * sij;
        }
    }
}

#[inline]
fn ssm_update<T: Scalar>(s: &mut [T], k: &[T], v: &[T], alpha: T, delta: T) {
    let dv = v.len();
    for (row, &ki) in s.chunks_exact_mut(dv).zip(k) {
        let dki = delta * ki;
        for (sij, &vj) in row.iter_mut().zip(v) {
            *sij = alpha * *sij + dki * vj;
        }
    }
}

/// Per-head block of columns in a `T × (H·w)` matrix row.
#[inline]
fn head<T>(row: &[T], h: usize, w: usize) -> &[T] {
    &row[h * w..(h + 1) * w]
}

#[inline]
fn head_mut<T>(row: &mut [T], h: usize, w: usize) -> &mut [T] {
    &mut row[h * w..(h + 1) * w]
}

/// Inputs of a GLA layer's recurrence; every matrix has one row per step.
pub(crate) struct GlaScan<'a, T> {
    pub q: &'a Tensor<T>,
    pub k: &'a Tensor<T>,
    pub v: &'a Tensor<T>,
    pub alpha: &'a Tensor<T>,
    pub dims: LayerDims,
}

/// Stored states at block boundaries: `[block][head] -> d_k·d_v`.
pub(crate) type Checkpoints<T> = Vec<Vec<Vec<T>>>;

impl<T: Scalar> GlaScan<'_, T> {
    fn steps(&self) -> usize {
        self.q.shape()[0]
    }

    /// Step-recurrent evaluation. Advances `states` in place and returns the
    /// raw per-head outputs (`T × H·d_v`).
    pub fn run(&self, states: &mut [Tensor<T>], mut ckpt: Option<&mut Checkpoints<T>>) -> Tensor<T> {
        let LayerDims {
            heads,
            d_key: dk,
            d_value: dv,
        } = self.dims;
        let steps = self.steps();
        let mut y = Tensor::zeros(&[steps, heads * dv]);
        for t in 0..steps {
            if t % CHECKPOINT_EVERY == 0 {
                if let Some(c) = ckpt.as_deref_mut() {
                    c.push(states.iter().map(|s| s.data().to_vec()).collect());
                }
            }
            let (q, k, v, a) = (self.q.row(t), self.k.row(t), self.v.row(t), self.alpha.row(t));
            let yr = y.row_mut(t);
            for (h, s) in states.iter_mut().enumerate() {
                gla_step(
                    s.data_mut(),
                    head(q, h, dk),
                    head(k, h, dk),
                    head(v, h, dv),
                    head(a, h, dk),
                    head_mut(yr, h, dv),
                );
            }
        }
        y
    }

    /// Chunkwise evaluation: within a block the output is
    /// `(q⊙e^{b_t})·S_0 + Σ_{s≤t} [Σ_i q_t k_s e^{b_t−b_s}]·v_s`
    /// with `b` the running sum of `ln α` inside the block.
    pub fn run_chunked(&self, states: &mut [Tensor<T>], chunk: usize) -> Tensor<T> {
        if chunk <= 1 {
            return self.run(states, None);
        }
        let LayerDims {
            heads,
            d_key: dk,
            d_value: dv,
        } = self.dims;
        let steps = self.steps();
        let mut y = Tensor::zeros(&[steps, heads * dv]);
        let mut t0 = 0;
        while t0 < steps {
            let c = chunk.min(steps - t0);
            for (h, s) in states.iter_mut().enumerate() {
                let gather = |m: &Tensor<T>, w: usize| -> Vec<T> {
                    (t0..t0 + c).flat_map(|t| head(m.row(t), h, w).to_vec()).collect()
                };
                let q = gather(self.q, dk);
                let k = gather(self.k, dk);
                let v = gather(self.v, dv);
                let log_a: Vec<f64> = gather(self.alpha, dk).iter().map(|a| a.f64().ln()).collect();
                let mut b = log_a;
                for t in 1..c {
                    for i in 0..dk {
                        b[t * dk + i] += b[(t - 1) * dk + i];
                    }
                }
                let decay = |t: usize, i: usize| b[t * dk + i];

                // inter-block: (q ⊙ e^b)·S0
                let qd: Vec<T> = (0..c * dk)
                    .map(|x| q[x] * T::of(decay(x / dk, x % dk).exp()))
                    .collect();
                let mut out = vec![T::zero(); c * dv];
                T::gemm(c, dk, dv, &qd, (dk as isize, 1), s.data(), (dv as isize, 1), T::zero(), &mut out);

                // intra-block causal scores
                let mut scores = vec![T::zero(); c * c];
                for t in 0..c {
                    for u in 0..=t {
                        let mut acc = 0.0f64;
                        for i in 0..dk {
                            acc += (q[t * dk + i] * k[u * dk + i]).f64() * (decay(t, i) - decay(u, i)).exp();
                        }
                        scores[t * c + u] = T::of(acc);
                    }
                }
                T::gemm(c, c, dv, &scores, (c as isize, 1), &v, (dv as isize, 1), T::one(), &mut out);

                // carry: S_end = diag(e^{b_last})·S0 + (k ⊙ e^{b_last − b})ᵀ·V
                let last = c - 1;
                let kd: Vec<T> = (0..c * dk)
                    .map(|x| k[x] * T::of((decay(last, x % dk) - decay(x / dk, x % dk)).exp()))
                    .collect();
                let sd = s.data_mut();
                for i in 0..dk {
                    let g = T::of(decay(last, i).exp());
                    sd[i * dv..(i + 1) * dv].iter_mut().for_each(|x| *x = *x * g);
                }
                T::gemm(dk, c, dv, &kd, (1, dk as isize), &v, (dv as isize, 1), T::one(), sd);

                for t in 0..c {
                    head_mut(y.row_mut(t0 + t), h, dv).copy_from_slice(&out[t * dv..(t + 1) * dv]);
                }
            }
            t0 += c;
        }
        y
    }

    /// Gradients `(dq, dk, dv, dα)` given `dy` on the raw outputs, starting
    /// from zero state gradient at the end of the sequence.
    pub fn backward(
        &self,
        ckpt: &Checkpoints<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
        let LayerDims {
            heads,
            d_key: dk,
            d_value: dv,
        } = self.dims;
        let steps = self.steps();
        let mut dq = Tensor::zeros(self.q.shape());
        let mut dk_t = Tensor::zeros(self.k.shape());
        let mut dv_t = Tensor::zeros(self.v.shape());
        let mut da = Tensor::zeros(self.alpha.shape());
        let n = dk * dv;
        let mut buf = vec![T::zero(); (CHECKPOINT_EVERY + 1) * n];
        let mut y_scratch = vec![T::zero(); dv];
        for h in 0..heads {
            let mut ds = vec![T::zero(); n];
            for (blk, saved) in ckpt.iter().enumerate().rev() {
                let t0 = blk * CHECKPOINT_EVERY;
                let t1 = (t0 + CHECKPOINT_EVERY).min(steps);
                buf[..n].copy_from_slice(&saved[h]);
                for t in t0..t1 {
                    let j = t - t0;
                    let (prev, cur) = buf.split_at_mut((j + 1) * n);
                    let cur = &mut cur[..n];
                    cur.copy_from_slice(&prev[j * n..]);
                    gla_step(
                        cur,
                        head(self.q.row(t), h, dk),
                        head(self.k.row(t), h, dk),
                        head(self.v.row(t), h, dv),
                        head(self.alpha.row(t), h, dk),
                        &mut y_scratch,
                    );
                }
                for t in (t0..t1).rev() {
                    let j = t - t0;
                    let s_prev = &buf[j * n..(j + 1) * n];
                    let s_cur = &buf[(j + 1) * n..(j + 2) * n];
                    let q = head(self.q.row(t), h, dk);
                    let k = head(self.k.row(t), h, dk);
                    let v = head(self.v.row(t), h, dv);
                    let a = head(self.alpha.row(t), h, dk);
                    let g = head(dy.row(t), h, dv);
                    let dq_r = head_mut(dq.row_mut(t), h, dk);
                    for i in 0..dk {
                        let row = &s_cur[i * dv..(i + 1) * dv];
                        dq_r[i] = row.iter().zip(g).fold(T::zero(), |acc, (&s, &gj)| acc + s * gj);
                    }
                    for i in 0..dk {
                        let dsr = &mut ds[i * dv..(i + 1) * dv];
                        for (x, &gj) in dsr.iter_mut().zip(g) {
                            *x = *x + q[i] * gj;
                        }
                    }
                    let dk_r = head_mut(dk_t.row_mut(t), h, dk);
                    for i in 0..dk {
                        let dsr = &ds[i * dv..(i + 1) * dv];
                        dk_r[i] = dsr.iter().zip(v).fold(T::zero(), |acc, (&d, &vj)| acc + d * vj);
                    }
                    let dv_r = head_mut(dv_t.row_mut(t), h, dv);
                    dv_r.iter_mut().for_each(|x| *x = T::zero());
                    for i in 0..dk {
                        let dsr = &ds[i * dv..(i + 1) * dv];
                        for (x, &d) in dv_r.iter_mut().zip(dsr) {
                            *x = *x + k[i] * d;
                        }
                    }
                    let da_r = head_mut(da.row_mut(t), h, dk);
                    for i in 0..dk {
                        let dsr = &mut ds[i * dv..(i + 1) * dv];
                        let sp = &s_prev[i * dv..(i + 1) * dv];
                        da_r[i] = dsr.iter().zip(sp).fold(T::zero(), |acc, (&d, &s)| acc + d * s);
                        dsr.iter_mut().for_each(|x| *x = *x * a[i]);
                    }
                }
            }
        }
        (dq, dk_t, dv_t, da)
    }
}

/// Inputs of a Mamba2 layer's recurrence. `q`, `k` are `T × d_k` and shared
/// by all heads; `v` is `T × H·d_v`; `alpha`, `delta` are `T × H`.
pub(crate) struct SsmScan<'a, T> {
    pub q: &'a Tensor<T>,
    pub k: &'a Tensor<T>,
    pub v: &'a Tensor<T>,
    pub alpha: &'a Tensor<T>,
    pub delta: &'a Tensor<T>,
    pub d_skip: &'a [T],
    pub dims: LayerDims,
}

pub(crate) struct SsmGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dalpha: Tensor<T>,
    pub ddelta: Tensor<T>,
    pub dd_skip: Vec<T>,
}

impl<T: Scalar> SsmScan<'_, T> {
    fn steps(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn run(&self, states: &mut [Tensor<T>], mut ckpt: Option<&mut Checkpoints<T>>) -> Tensor<T> {
        let LayerDims { heads, d_value: dv, .. } = self.dims;
        let steps = self.steps();
        let mut y = Tensor::zeros(&[steps, heads * dv]);
        for t in 0..steps {
            if t % CHECKPOINT_EVERY == 0 {
                if let Some(c) = ckpt.as_deref_mut() {
                    c.push(states.iter().map(|s| s.data().to_vec()).collect());
                }
            }
            let (q, k, v) = (self.q.row(t), self.k.row(t), self.v.row(t));
            let (a, dl) = (self.alpha.row(t), self.delta.row(t));
            let yr = y.row_mut(t);
            for (h, s) in states.iter_mut().enumerate() {
                let vh = head(v, h, dv);
                ssm_update(s.data_mut(), k, vh, a[h], dl[h]);
                let out = head_mut(yr, h, dv);
                query(s.data(), q, out);
                for (o, &vj) in out.iter_mut().zip(vh) {
                    *o = *o + self.d_skip[h] * vj;
                }
            }
        }
        y
    }

    pub fn run_chunked(&self, states: &mut [Tensor<T>], chunk: usize) -> Tensor<T> {
        if chunk <= 1 {
            return self.run(states, None);
        }
        let LayerDims {
            heads,
            d_key: dk,
            d_value: dv,
        } = self.dims;
        let steps = self.steps();
        let mut y = Tensor::zeros(&[steps, heads * dv]);
        let mut t0 = 0;
        while t0 < steps {
            let c = chunk.min(steps - t0);
            let q = &self.q.data()[t0 * dk..(t0 + c) * dk];
            let k = &self.k.data()[t0 * dk..(t0 + c) * dk];
            // shared q·kᵀ for the block
            let mut qk = vec![T::zero(); c * c];
            T::gemm(c, dk, c, q, (dk as isize, 1), k, (1, dk as isize), T::zero(), &mut qk);
            for (h, s) in states.iter_mut().enumerate() {
                let v: Vec<T> = (t0..t0 + c).flat_map(|t| head(self.v.row(t), h, dv).to_vec()).collect();
                let mut b = vec![0.0f64; c];
                let mut acc = 0.0;
                for (j, bj) in b.iter_mut().enumerate() {
                    acc += self.alpha.row(t0 + j)[h].f64().ln();
                    *bj = acc;
                }
                let delta: Vec<f64> = (0..c).map(|j| self.delta.row(t0 + j)[h].f64()).collect();

                let mut out = vec![T::zero(); c * dv];
                T::gemm(c, dk, dv, q, (dk as isize, 1), s.data(), (dv as isize, 1), T::zero(), &mut out);
                for t in 0..c {
                    let g = T::of(b[t].exp());
                    out[t * dv..(t + 1) * dv].iter_mut().for_each(|x| *x = *x * g);
                }
                let mut scores = vec![T::zero(); c * c];
                for t in 0..c {
                    for u in 0..=t {
                        scores[t * c + u] = T::of(qk[t * c + u].f64() * (b[t] - b[u]).exp() * delta[u]);
                    }
                }
                T::gemm(c, c, dv, &scores, (c as isize, 1), &v, (dv as isize, 1), T::one(), &mut out);

                let last = c - 1;
                let kd: Vec<T> = (0..c * dk)
                    .map(|x| {
                        let u = x / dk;
                        k[x] * T::of((b[last] - b[u]).exp() * delta[u])
                    })
                    .collect();
                let g = T::of(b[last].exp());
                s.data_mut().iter_mut().for_each(|x| *x = *x * g);
                T::gemm(dk, c, dv, &kd, (1, dk as isize), &v, (dv as isize, 1), T::one(), s.data_mut());

                let dsk = self.d_skip[h];
                for t in 0..c {
                    let dst = head_mut(y.row_mut(t0 + t), h, dv);
                    for j in 0..dv {
                        dst[j] = out[t * dv + j] + dsk * v[t * dv + j];
                    }
                }
            }
            t0 += c;
        }
        y
    }

    pub fn backward(&self, ckpt: &Checkpoints<T>, dy: &Tensor<T>) -> SsmGrads<T> {
        let LayerDims {
            heads,
            d_key: dk,
            d_value: dv,
        } = self.dims;
        let steps = self.steps();
        let mut g = SsmGrads {
            dq: Tensor::zeros(self.q.shape()),
            dk: Tensor::zeros(self.k.shape()),
            dv: Tensor::zeros(self.v.shape()),
            dalpha: Tensor::zeros(self.alpha.shape()),
            ddelta: Tensor::zeros(self.delta.shape()),
            dd_skip: vec![T::zero(); heads],
        };
        let n = dk * dv;
        let mut buf = vec![T::zero(); (CHECKPOINT_EVERY + 1) * n];
        let mut dsv = vec![T::zero(); dk];
        for h in 0..heads {
            let mut ds = vec![T::zero(); n];
            let mut dd = 0.0f64;
            for (blk, saved) in ckpt.iter().enumerate().rev() {
                let t0 = blk * CHECKPOINT_EVERY;
                let t1 = (t0 + CHECKPOINT_EVERY).min(steps);
                buf[..n].copy_from_slice(&saved[h]);
                for t in t0..t1 {
                    let j = t - t0;
                    let (prev, cur) = buf.split_at_mut((j + 1) * n);
                    let cur = &mut cur[..n];
                    cur.copy_from_slice(&prev[j * n..]);
                    ssm_update(
                        cur,
                        self.k.row(t),
                        head(self.v.row(t), h, dv),
                        self.alpha.row(t)[h],
                        self.delta.row(t)[h],
                    );
                }
                for t in (t0..t1).rev() {
                    let j = t - t0;
                    let s_prev = &buf[j * n..(j + 1) * n];
                    let s_cur = &buf[(j + 1) * n..(j + 2) * n];
                    let q = self.q.row(t);
                    let k = self.k.row(t);
                    let v = head(self.v.row(t), h, dv);
                    let a = self.alpha.row(t)[h];
                    let delta = self.delta.row(t)[h];
                    let go = head(dy.row(t), h, dv);

                    // o = q·S + D·v
                    dd += go.iter().zip(v).map(|(&x, &y)| (x * y).f64()).sum::<f64>();
                    {
                        let dq = g.dq.row_mut(t);
                        for i in 0..dk {
                            let row = &s_cur[i * dv..(i + 1) * dv];
                            dq[i] = dq[i] + row.iter().zip(go).fold(T::zero(), |acc, (&s, &x)| acc + s * x);
                        }
                    }
                    for i in 0..dk {
                        for (x, &gj) in ds[i * dv..(i + 1) * dv].iter_mut().zip(go) {
                            *x = *x + q[i] * gj;
                        }
                    }
                    // S = α·S_prev + Δ·kᵀv
                    for i in 0..dk {
                        dsv[i] = ds[i * dv..(i + 1) * dv]
                            .iter()
                            .zip(v)
                            .fold(T::zero(), |acc, (&d, &vj)| acc + d * vj);
                    }
                    {
                        let dkr = g.dk.row_mut(t);
                        for i in 0..dk {
                            dkr[i] = dkr[i] + delta * dsv[i];
                        }
                    }
                    g.ddelta.row_mut(t)[h] = k.iter().zip(&dsv).fold(T::zero(), |acc, (&ki, &x)| acc + ki * x);
                    {
                        let dvr = head_mut(g.dv.row_mut(t), h, dv);
                        for (x, &gj) in dvr.iter_mut().zip(go) {
                            *x = self.d_skip[h] * gj;
                        }
                        for i in 0..dk {
                            let w = delta * k[i];
                            for (x, &d) in dvr.iter_mut().zip(&ds[i * dv..(i + 1) * dv]) {
                                *x = *x + w * d;
                            }
                        }
                    }
                    g.dalpha.row_mut(t)[h] = ds.iter().zip(s_prev).fold(T::zero(), |acc, (&d, &s)| acc + d * s);
                    ds.iter_mut().for_each(|x| *x = *x * a);
                }
            }
            g.dd_skip[h] = T::of(dd);
        }
        g
    }
}
