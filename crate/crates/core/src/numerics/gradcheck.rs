use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the objective and its analytic gradient at the given point.
/// The result is the maximum over coordinates of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must be in (0, 1e-2], got {eps}")));
    }
    let (value, analytic) = f(x)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "objective".into(),
            layer: None,
        });
    }
    if analytic.shape() != x.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} vs input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: "objective".into(),
                layer: None,
            });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(|x| Ok((x.sum_sq(), x.scale(2.0))), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn plain_sum() {
        let x = Tensor::from_vec(&[3], vec![-4.0, 0.5, 9.0]).unwrap();
        let err = grad_check(|x| Ok((x.sum(), Tensor::ones(x.shape()))), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let e = grad_check(|x| Ok((f64::NAN, x.clone())), &x, 1e-5).unwrap_err();
        assert!(e.to_string().contains("non-finite objective"), "{e}");
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert!(grad_check(|x| Ok((x.sum(), x.clone())), &x, 0.1).is_err());
    }
}
