//! Shared helpers for the token-mixing and FFN blocks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Named parameter tensors, sorted by name.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

/// Gradients of one block keyed by the tensor's short name.
pub type BlockGrads<T> = Vec<(&'static str, Tensor<T>)>;

pub const NORM_EPS: f64 = 1e-6;

/// How a recurrence is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scan {
    Step,
    Chunked(usize),
}

pub(crate) fn fetch<'a, T: Scalar>(
    params: &'a ParamMap<T>,
    prefix: &str,
    name: &str,
    shape: &[usize],
) -> Result<&'a Tensor<T>> {
    let full = format!("{prefix}{name}");
    let t = params
        .get(&full)
        .ok_or_else(|| Error::Schema(format!("missing tensor `{full}`")))?;
    if t.shape() != shape {
        return Err(Error::Schema(format!(
            "tensor `{full}` has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

pub(crate) fn check_input<T: Scalar>(x: &Tensor<T>, d: usize) -> Result<usize> {
    let (steps, w) = x.dims2()?;
    if w != d {
        return Err(Error::shape(format!("input width {w}, model width {d}")));
    }
    if steps == 0 {
        return Err(Error::invalid("sequence must have at least one step"));
    }
    Ok(steps)
}

pub(crate) fn finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
            layer: None,
        })
    }
}
