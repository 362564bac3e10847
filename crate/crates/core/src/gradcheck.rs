//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Numerical gradient of `f` at `theta` by central differences.
pub fn numerical_gradient(mut f: impl FnMut(&Tensor) -> Result<f64>, theta: &Tensor) -> Result<Tensor> {
    let mut probe = theta.clone();
    let mut grad = Tensor::zeros(theta.shape());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    Ok(grad)
}

/// Largest relative disagreement `|fd - an| / max(1e-8, |fd| + |an|)`.
pub fn relative_error(numerical: &Tensor, analytic: &Tensor) -> Result<f64> {
    if numerical.shape() != analytic.shape() {
        return Err(Error::ShapeMismatch {
            left: numerical.shape().to_vec(),
            right: analytic.shape().to_vec(),
            context: "gradient check",
        });
    }
    Ok(numerical
        .data()
        .iter()
        .zip(analytic.data())
        .map(|(&n, &a)| (n - a).abs() / (n.abs() + a.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

/// Compares `analytic_grad` with central differences of `f` at `theta`.
pub fn finite_difference_check(
    f: impl FnMut(&Tensor) -> Result<f64>,
    theta: &Tensor,
    analytic_grad: &Tensor,
) -> Result<f64> {
    let numerical = numerical_gradient(f, theta)?;
    relative_error(&numerical, analytic_grad)
}
