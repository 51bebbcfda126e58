//! The l-inf ball / valid-pixel-range projection shared by attacks and
//! free training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sign;

/// Closed interval of valid pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    pub const PIXELS_255: ValueRange = ValueRange { lo: 0.0, hi: 255.0 };
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!("invalid value range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, v: f32) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn clamp(&self, v: f32) -> f32 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }
}

/// Makes `delta` feasible and writes the perturbed input into `x_adv`.
///
/// `delta` is clipped to `[-eps, eps]`, `x + delta` is clamped to `range`,
/// and `delta` is re-derived from the clamped point. On return every element
/// satisfies `|delta| <= eps`, `x_adv` lies in `range`, and `|x_adv - x| <= eps`
/// holds exactly (the clamped point is nudged by one ulp when `f32` rounding of
/// `x + delta` would overshoot the ball). `x` must lie in `range`.
pub fn project(x: &[f32], delta: &mut [f32], x_adv: &mut [f32], eps: f32, range: ValueRange) {
    debug_assert_eq!(x.len(), delta.len());
    debug_assert_eq!(x.len(), x_adv.len());
    let eps64 = eps as f64;
    for ((&xi, d), a) in x.iter().zip(delta.iter_mut()).zip(x_adv.iter_mut()) {
        let clipped = d.clamp(-eps, eps);
        let mut v = range.clamp(xi + clipped);
        while (v as f64 - xi as f64).abs() > eps64 {
            v = if v > xi { v.next_down() } else { v.next_up() };
        }
        *a = v;
        *d = (v - xi).clamp(-eps, eps);
    }
}

/// One signed-gradient ascent step `delta += step * sign(grad)` followed by
/// [`project`].
pub fn signed_step(
    x: &[f32],
    grad: &[f32],
    delta: &mut [f32],
    x_adv: &mut [f32],
    step: f32,
    eps: f32,
    range: ValueRange,
) {
    for (d, &g) in delta.iter_mut().zip(grad) {
        *d += step * sign(g);
    }
    project(x, delta, x_adv, eps, range);
}
