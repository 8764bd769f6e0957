//! Finite-difference gradient checking.
//!
//! Rebuilds the computation per perturbed element, so it is meant for small
//! tensors in f64. Tolerances follow the relative-error convention
//! `|a-b| / max(1e-6, |a|, |b|)`.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x`: element `i` is
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn numeric_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a-b|` scaled by the larger magnitude, floored at 1e-6 so values near
/// zero compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-6_f64.max(a.abs()).max(b.abs())
}

/// Worst [`rel_err`] over two same-shaped tensors.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}
