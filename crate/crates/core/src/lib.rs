//! Estimation for atomic deconvolution models `Z = U + A X`, where `A` is a
//! Bernoulli switch with `P[A = 0] = p` and the noise `U` has a known (or
//! calibrated) law.

pub mod cli;
pub mod error;
pub mod estimate_f;
pub mod estimate_p;
pub mod kernels;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
