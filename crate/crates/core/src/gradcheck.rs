//! Central finite differences, used as an independent check on the tape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is probed at `x_i + h` and `x_i - h`. Because the probe
/// points are rounded to `f32`, the quotient divides by the step actually
/// taken rather than by `2h`. `f` reports in `f64` so callers can evaluate
/// with a higher-precision reference.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let (up, down) = (orig + h, orig - h);
        probe.data_mut()[i] = up;
        let f_up = f(&probe)?;
        probe.data_mut()[i] = down;
        let f_down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !f_up.is_finite() || !f_down.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        let step = up as f64 - down as f64;
        grad.push(((f_up - f_down) / step) as f32);
    }
    Tensor::new(x.shape().to_vec(), grad)
}
