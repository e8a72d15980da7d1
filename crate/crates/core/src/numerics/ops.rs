//! Differentiable primitives. Each forward has a matching backward that
//! returns input gradients given the output gradient.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Row-major strides of an `r×c` matrix, optionally read transposed.
fn strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn gemm_op<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    out: Option<&mut Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims {k} vs {k2} ({:?}{} · {:?}{})",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" },
        )));
    }
    let sa = strides(ac, ta);
    let sb = strides(bc, tb);
    match out {
        Some(c) => {
            if c.shape() != [m, n] {
                return Err(Error::shape(format!(
                    "accumulator {:?} vs product [{m}, {n}]",
                    c.shape()
                )));
            }
            T::gemm(m, k, n, a.data(), sa, b.data(), sb, T::one(), c.data_mut());
            Ok(None)
        }
        None => {
            let mut c = Tensor::zeros(&[m, n]);
            T::gemm(m, k, n, a.data(), sa, b.data(), sb, T::zero(), c.data_mut());
            Ok(Some(c))
        }
    }
}

/// `a·b`
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(gemm_op(a, false, b, false, None)?.expect("fresh output"))
}

/// `aᵀ·b`
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(gemm_op(a, true, b, false, None)?.expect("fresh output"))
}

/// `a·bᵀ`
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(gemm_op(a, false, b, true, None)?.expect("fresh output"))
}

/// `c += a·bᵀ`
pub fn matmul_nt_acc<T: Scalar>(c: &mut Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    gemm_op(a, false, b, true, Some(c)).map(drop)
}

/// `c += aᵀ·b`
pub fn matmul_tn_acc<T: Scalar>(c: &mut Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    gemm_op(a, true, b, false, Some(c)).map(drop)
}

/// Gradients of `c = a·b`: `(dc·bᵀ, aᵀ·dc)`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

/// Adds `bias` to every row of `x`.
pub fn add_row_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let (r, c) = x.dims2()?;
    if bias.len() != c {
        return Err(Error::shape(format!("bias {} vs width {c}", bias.len())));
    }
    for i in 0..r {
        for (v, &b) in x.row_mut(i).iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(())
}

/// Column sums of a matrix (gradient of a broadcast row bias).
pub fn column_sums<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0f64; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v.f64();
        }
    }
    Tensor::from_vec(&[c], out.into_iter().map(T::of).collect())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn sigmoid_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() - s)
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn softplus_grad<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

/// Inverse of softplus for `y > 0`.
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    -softplus(-x)
}

/// Scale-only RMS normalization applied independently to each contiguous
/// group of `group` columns in every row. Returns the output and one inverse
/// RMS per (row, group).
pub fn rms_norm_groups<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    group: usize,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (r, c) = x.dims2()?;
    if group == 0 || c % group != 0 || scale.len() != c {
        return Err(Error::shape(format!(
            "rms norm: width {c}, group {group}, scale {}",
            scale.len()
        )));
    }
    let groups = c / group;
    let mut y = Tensor::zeros(&[r, c]);
    let mut inv = Vec::with_capacity(r * groups);
    for i in 0..r {
        let xr = x.row(i);
        let yr = y.row_mut(i);
        for g in 0..groups {
            let span = g * group..(g + 1) * group;
            let ms = xr[span.clone()].iter().map(|v| v.f64() * v.f64()).sum::<f64>() / group as f64;
            let iv = T::of(1.0 / (ms + eps).sqrt());
            inv.push(iv);
            for j in span {
                yr[j] = xr[j] * iv * scale.data()[j];
            }
        }
    }
    Ok((y, inv))
}

/// Backward of [`rms_norm_groups`]; returns `(dx, dscale)`.
pub fn rms_norm_groups_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    inv: &[T],
    group: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (r, c) = x.dims2()?;
    let groups = c / group;
    let mut dx = Tensor::zeros(&[r, c]);
    let mut dscale = vec![0.0f64; c];
    let s = scale.data();
    for i in 0..r {
        let xr = x.row(i);
        let dyr = dy.row(i);
        let dxr = dx.row_mut(i);
        for g in 0..groups {
            let iv = inv[i * groups + g];
            let span = g * group..(g + 1) * group;
            // dxhat = dy ⊙ s ; dx = inv·(dxhat − xhat·mean(dxhat ⊙ xhat))
            let mut dot = 0.0f64;
            for j in span.clone() {
                let xhat = xr[j] * iv;
                dscale[j] += (dyr[j] * xhat).f64();
                dot += (dyr[j] * s[j] * xhat).f64();
            }
            let mean = T::of(dot / group as f64);
            for j in span {
                let xhat = xr[j] * iv;
                dxr[j] = iv * (dyr[j] * s[j] - xhat * mean);
            }
        }
    }
    Ok((dx, Tensor::from_vec(&[c], dscale.into_iter().map(T::of).collect())?))
}

/// Summed next-token cross-entropy over the rows where `mask` is set (all
/// rows when `None`), with the gradient w.r.t. the logits of that sum.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u32],
    mask: Option<&[bool]>,
) -> Result<(f64, usize, Tensor<T>)> {
    let (r, v) = logits.dims2()?;
    if targets.len() != r || mask.is_some_and(|m| m.len() != r) {
        return Err(Error::shape(format!(
            "{r} logit rows vs {} targets",
            targets.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut grad = Tensor::zeros(&[r, v]);
    for i in 0..r {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let t = targets[i] as usize;
        if t >= v {
            return Err(Error::invalid(format!("target {t} outside vocab {v}")));
        }
        let row = logits.row(i);
        let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - row[t].f64();
        count += 1;
        let g = grad.row_mut(i);
        for (gj, xj) in g.iter_mut().zip(row) {
            *gj = T::of((xj.f64() - lse).exp());
        }
        g[t] = g[t] - T::one();
    }
    Ok((total, count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, seeded_normal, Rng};

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        seeded_normal(&mut Rng::new(seed), shape, 1.0).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[4., 5., 10., 11.]);
        let ct = matmul_tn(&a, &a).unwrap();
        assert_eq!(ct.shape(), &[3, 3]);
        assert_eq!(ct.data()[0], 17.0);
        let cn = matmul_nt(&a, &a).unwrap();
        assert_eq!(cn.data(), &[14., 32., 32., 77.]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn f32_gemm_matches_f64() {
        let a = rand(&[5, 7], 1);
        let b = rand(&[7, 3], 2);
        let c64 = matmul(&a, &b).unwrap();
        let c32 = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        assert!(c64.max_abs_diff(&c32.cast()).unwrap() < 1e-5);
    }

    #[test]
    fn matmul_gradients() {
        let a = rand(&[3, 4], 1);
        let b = rand(&[4, 2], 2);
        let w = rand(&[3, 2], 3);
        let loss = |c: &Tensor<f64>| c.mul(&w).unwrap().sum();
        let err = grad_check(
            |a: &Tensor<f64>| {
                let c = matmul(a, &b)?;
                let (da, _) = matmul_backward(a, &b, &w)?;
                Ok((loss(&c), da))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |b: &Tensor<f64>| {
                let c = matmul(&a, b)?;
                let (_, db) = matmul_backward(&a, b, &w)?;
                Ok((loss(&c), db))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn check_unary(f: fn(f64) -> f64, df: fn(f64) -> f64, spread: f64) {
        let x = rand(&[16], 9).scale(spread);
        let w = rand(&[16], 10);
        let err = grad_check(
            |x: &Tensor<f64>| {
                let y = x.map(f).mul(&w)?.sum();
                Ok((y, x.map(df).mul(&w)?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(sigmoid, sigmoid_grad, 3.0);
        check_unary(silu, silu_grad, 3.0);
        check_unary(softplus, softplus_grad, 3.0);
        // Wide inputs make the summed objective so large that central
        // differences cannot resolve the small coordinates.
        check_unary(f64::exp, f64::exp, 1.0);
        check_unary(log_sigmoid, |x| 1.0 - sigmoid(x), 3.0);
    }

    #[test]
    fn add_and_mul_gradients() {
        let a = rand(&[6], 1);
        let b = rand(&[6], 2);
        let err = grad_check(|x: &Tensor<f64>| Ok((x.add(&b)?.mul(&b)?.sum(), b.clone())), &a, 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-3, 0.05, 1.0, 7.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn rms_norm_gradients() {
        let x = rand(&[3, 8], 4);
        let s = rand(&[8], 5);
        let w = rand(&[3, 8], 6);
        let err = grad_check(
            |x: &Tensor<f64>| {
                let (y, inv) = rms_norm_groups(x, &s, 4, 1e-6)?;
                let (dx, _) = rms_norm_groups_backward(x, &s, &inv, 4, &w)?;
                Ok((y.mul(&w)?.sum(), dx))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let err = grad_check(
            |s: &Tensor<f64>| {
                let (y, inv) = rms_norm_groups(&x, s, 4, 1e-6)?;
                let (_, ds) = rms_norm_groups_backward(&x, s, &inv, 4, &w)?;
                Ok((y.mul(&w)?.sum(), ds))
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cross_entropy_gradient_and_uniform_value() {
        let z = Tensor::<f64>::zeros(&[2, 4]);
        let (l, n, _) = cross_entropy(&z, &[1, 3], None).unwrap();
        assert_eq!(n, 2);
        assert!((l / 2.0 - 4f64.ln()).abs() < 1e-12);

        let x = rand(&[3, 5], 7);
        let mask = [true, false, true];
        let err = grad_check(
            |x: &Tensor<f64>| {
                let (l, _, g) = cross_entropy(x, &[0, 2, 4], Some(&mask))?;
                Ok((l, g))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
