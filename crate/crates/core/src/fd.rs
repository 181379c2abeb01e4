//! Central-difference gradient oracle.
//!
//! Independent of the tape: it only evaluates the supplied closure, so it can
//! referee every recorded adjoint.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central differences `(f(x+εe) − f(x−εe)) / 2ε` per coordinate, with
/// `ε = base_eps·max(1, |x_i|)`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, base_eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let eps = base_eps * orig.abs().max(1.0);
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(
                "finite_diff_grad",
                format!("objective returned non-finite value at coordinate {i}"),
            ));
        }
        grad[i] = (up - down) / (2.0 * eps);
    }
    Ok(Tensor::from_op(x.shape().to_vec(), grad))
}

/// Default step for [`finite_diff_grad`].
pub const FD_EPS: f64 = 1e-5;

/// Relative error with denominator `max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest coordinate-wise [`rel_err`] between two equally-shaped tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}
