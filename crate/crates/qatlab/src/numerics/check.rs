//! Central-difference gradient verification.
//!
//! Runs the loss function as a black box and compares analytic gradients
//! coordinate by coordinate against `(f(x+h) - f(x-h)) / 2h`, scoring each
//! with `|a - n| / (|a| + |n| + 1e-12)`.

use super::{Scalar, Tensor};

/// Maximum relative error over every coordinate of every parameter.
pub fn grad_check(
    eval: &dyn Fn(&[Tensor<f64>]) -> f64,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
) -> f64 {
    grad_check_strided(eval, params, analytic, h, 1, 0, 0.0)
}

/// Like [`grad_check`] but probes only coordinates `offset, offset+stride, …`
/// of each parameter, and skips coordinates where both the analytic and the
/// numeric gradient are below `atol` (central differences on an exactly flat
/// direction measure only roundoff, which the relative score would misread).
pub fn grad_check_strided(
    eval: &dyn Fn(&[Tensor<f64>]) -> f64,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    stride: usize,
    offset: usize,
    atol: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        assert_eq!(p.shape(), analytic[pi].shape());
        let mut i = offset;
        while i < p.numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let fp = eval(&work);
            work[pi].data_mut()[i] = orig - h;
            let fm = eval(&work);
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let exact = analytic[pi].data()[i];
            if exact.abs().maxs(numeric.abs()) >= atol {
                let rel = (exact - numeric).abs() / (exact.abs() + numeric.abs() + 1e-12);
                worst = worst.max(rel);
            }
            i += stride.max(1);
        }
    }
    worst
}
