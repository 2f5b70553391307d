use super::tensor::Tensor;
use crate::error::Result;

/// Magnitudes below this are compared absolutely in [`relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Central-difference gradient estimate of a scalar function at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.values().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&Tensor::new(probe.clone(), x.shape())?)?;
        probe[i] = orig - eps;
        let lo = f(&Tensor::new(probe.clone(), x.shape())?)?;
        probe[i] = orig;
        grad.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(grad, x.shape())
}

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{log_sigmoid, sum};

    #[test]
    fn square_derivative() {
        let g = finite_diff_check(|t| Ok(t.values()[0].powi(2)), &Tensor::vector(vec![3.0]), 1e-6)
            .unwrap();
        assert!((g.values()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_check(|_| Ok(4.2), &Tensor::vector(vec![1.0, -2.0, 0.5]), 1e-6).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_sigmoid_sum_at_zero() {
        let g = finite_diff_check(|t| sum(&log_sigmoid(t)).item(), &Tensor::zeros(&[4]), 1e-6)
            .unwrap();
        g.values().iter().for_each(|v| assert!((v - 0.5).abs() < 1e-8));
    }
}
