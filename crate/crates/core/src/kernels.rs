//! Fourier-domain kernels.
//!
//! [`FlatTopKernel`] vanishes to infinite order at the origin and is used to
//! read off the atom weight from high frequencies. [`sinc_phi`] is the ideal
//! low-pass window used by the density estimator.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{positive, Error, Result};
use crate::spectral::simpson_weight;

const NORMALIZER_POINTS: usize = (1 << 16) + 1;

pub const DEFAULT_KERNEL_A: f64 = 1.0;
pub const DEFAULT_KERNEL_M: f64 = 2.0;

/// `exp(-a |t|^-m) / C` on `0 < |t| <= 1`, zero elsewhere, with `C` chosen so
/// that the kernel integrates to 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatTopKernel {
    pub a: f64,
    pub m: f64,
    pub normalizer: f64,
}

impl FlatTopKernel {
    pub fn new(a: f64, m: f64) -> Result<Self> {
        let normalizer = flat_top_normalizer(a, m)?;
        Ok(Self { a, m, normalizer })
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let u = t.abs();
        if u == 0.0 || u > 1.0 {
            0.0
        } else {
            (-self.a * u.powf(-self.m)).exp() / self.normalizer
        }
    }
}

impl Default for FlatTopKernel {
    fn default() -> Self {
        Self::new(DEFAULT_KERNEL_A, DEFAULT_KERNEL_M).expect("default kernel parameters are valid")
    }
}

/// `(1/2) * integral over [-1, 1] of exp(-a |t|^-m)`, the integrand taken as 0 at `t = 0`.
pub fn flat_top_normalizer(a: f64, m: f64) -> Result<f64> {
    positive("a", a)?;
    if !(m.is_finite() && m >= 1.0) {
        return Err(Error::invalid("m", format!("must be at least 1, got {m}")));
    }
    let n = NORMALIZER_POINTS;
    let step = 1.0 / (n - 1) as f64;
    let sum: f64 = (1..n)
        .map(|i| {
            let t = i as f64 * step;
            simpson_weight(i, n) * (-a * t.powf(-m)).exp()
        })
        .sum();
    let c = sum * step / 3.0;
    if c.is_nan() || c <= 0.0 {
        return Err(Error::Numerical(format!(
            "flat-top normalizer underflows for a = {a}, m = {m}"
        )));
    }
    Ok(c)
}

pub fn flat_top_eval(kernel: &FlatTopKernel, t: f64) -> f64 {
    kernel.eval(t)
}

/// Fourier side of the sinc kernel: the indicator of `[-1, 1]`.
#[inline]
pub fn sinc_phi(t: f64) -> f64 {
    if t.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// `sin(x) / (pi x)`, equal to `1/pi` at the origin.
pub fn sinc_x(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        // sin(x)/x = 1 - x^2/6 + O(x^4)
        (1.0 - x * x / 6.0) / PI
    } else {
        x.sin() / (PI * x)
    }
}
