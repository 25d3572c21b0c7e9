//! Central finite-difference gradient checking.
//!
//! `check` perturbs every input element of a scalar-valued function and
//! compares the numeric slope against an analytic gradient. It goes through
//! the forward path only, so it is an independent oracle for any backward
//! implementation.

use crate::tensor::{Scalar, Tensor};

/// Largest relative error between an analytic gradient and central finite
/// differences of `f` at `x`. `f` must be a pure scalar function of `x`.
pub fn max_rel_error<S, F>(f: F, x: &Tensor<S>, analytic: &Tensor<S>, step: f64) -> f64
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> S,
{
    assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i].as_f64();
        let h = step * (1.0 + orig.abs());
        let mut xp = x.clone();
        xp.data_mut()[i] = S::from_f64(orig + h);
        let fp = f(&xp).as_f64();
        xp.data_mut()[i] = S::from_f64(orig - h);
        let fm = f(&xp).as_f64();
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum(x^2), grad = 2x
        let x = Tensor::<f64>::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let g = x.map(|v| 2.0 * v);
        let err = max_rel_error(|t| t.data().iter().map(|v| v * v).sum(), &x, &g, 1e-6);
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let bad = x.map(|v| 3.0 * v);
        let err = max_rel_error(|t| t.data().iter().map(|v| v * v).sum(), &x, &bad, 1e-6);
        assert!(err > 0.1);
    }
}
