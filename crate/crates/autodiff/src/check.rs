//! Finite-difference utilities for validating analytic gradients.

use crate::Arr;

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_diff<F>(mut f: F, x: &Arr, step: f64) -> Arr
where
    F: FnMut(&Arr) -> f64,
{
    let mut grad = Arr::zeros(x.raw_dim());
    let mut probe = x.clone();
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error between two gradients: `|a - b| / max(1e-8, |a|, |b|)`,
/// reduced with `max` over elements.
pub fn rel_err(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// numpy-style allclose for gradient comparisons.
pub fn grads_close(a: &Arr, b: &Arr, atol: f64, rtol: f64) -> bool {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .all(|(&x, &y)| (x - y).abs() <= atol + rtol * x.abs().max(y.abs()))
}

pub fn max_abs_diff(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}
