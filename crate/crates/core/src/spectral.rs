//! Characteristic functions, noise densities and the frequency-grid
//! quadrature shared by both estimators.
//!
//! Every frequency integral in the crate is a composite Simpson sum over a
//! uniform, symmetric, odd-length [`FrequencyGrid`]. Empirical characteristic
//! functions are evaluated on the non-negative half of a grid and mirrored,
//! so series built from real data are Hermitian to the last bit.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{positive, Error, Result};

/// Default number of quadrature nodes per frequency integral.
pub const DEFAULT_QUAD_POINTS: usize = 4097;

/// Default modulus floor applied to the noise characteristic function
/// wherever it is divided by.
pub const DEFAULT_CF_FLOOR: f64 = 1e-12;

/// Uniform symmetric grid `t_min = -t_max, ..., t_max` with an odd number of nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub t_min: f64,
    pub t_max: f64,
    pub n_points: usize,
    pub step: f64,
}

impl FrequencyGrid {
    pub fn symmetric(t_max: f64, n_points: usize) -> Result<Self> {
        positive("t_max", t_max)?;
        if n_points < 3 || n_points.is_multiple_of(2) {
            return Err(Error::invalid(
                "n_points",
                format!("must be odd and at least 3, got {n_points}"),
            ));
        }
        Ok(Self {
            t_min: -t_max,
            t_max,
            n_points,
            step: 2.0 * t_max / (n_points - 1) as f64,
        })
    }

    /// Index of the `t = 0` node.
    pub fn center(&self) -> usize {
        self.n_points / 2
    }

    pub fn t(&self, i: usize) -> f64 {
        // Mirror the positive half so that t(center - m) == -t(center + m) exactly.
        let c = self.center();
        if i >= c {
            (i - c) as f64 * self.step
        } else {
            -((c - i) as f64 * self.step)
        }
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(move |i| self.t(i))
    }

    /// Same support with twice the resolution.
    pub fn refined(&self) -> Self {
        Self::symmetric(self.t_max, 2 * self.n_points - 1).expect("refinement of a valid grid")
    }
}

/// Complex samples of a function on a [`FrequencyGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSeries {
    pub grid: FrequencyGrid,
    pub values: Vec<Complex64>,
}

impl ComplexSeries {
    pub fn new(grid: FrequencyGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.n_points {
            return Err(Error::invalid(
                "values",
                format!(
                    "length {} does not match grid size {}",
                    values.len(),
                    grid.n_points
                ),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: FrequencyGrid, f: impl Fn(f64) -> Complex64) -> Self {
        let values = grid.points().map(f).collect();
        Self { grid, values }
    }

    /// Builds a Hermitian series from its values on `t >= 0`.
    pub(crate) fn from_nonnegative_half(grid: FrequencyGrid, half: &[Complex64]) -> Self {
        let c = grid.center();
        debug_assert_eq!(half.len(), c + 1);
        let mut values = vec![Complex64::new(0.0, 0.0); grid.n_points];
        for (m, v) in half.iter().enumerate() {
            values[c + m] = *v;
            values[c - m] = v.conj();
        }
        Self { grid, values }
    }

    /// Largest `|v(-t) - conj(v(t))|` over the grid.
    pub fn hermitian_residual(&self) -> f64 {
        let n = self.values.len();
        (0..n)
            .map(|i| (self.values[n - 1 - i] - self.values[i].conj()).norm())
            .fold(0.0, f64::max)
    }
}

/// Law of a real random variable, seen through its characteristic function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CharacteristicFunction {
    Empirical {
        samples: Vec<f64>,
    },
    GammaAnalytic {
        k: f64,
        theta: f64,
    },
    KdeCalibrated {
        calibration: Vec<f64>,
        bandwidth: f64,
    },
}

impl CharacteristicFunction {
    pub fn empirical(samples: Vec<f64>) -> Result<Self> {
        check_samples(&samples)?;
        Ok(Self::Empirical { samples })
    }

    pub fn gamma(k: f64, theta: f64) -> Result<Self> {
        positive("k", k)?;
        positive("theta", theta)?;
        Ok(Self::GammaAnalytic { k, theta })
    }

    pub fn kde(calibration: Vec<f64>, bandwidth: f64) -> Result<Self> {
        check_samples(&calibration)?;
        positive("bandwidth", bandwidth)?;
        Ok(Self::KdeCalibrated {
            calibration,
            bandwidth,
        })
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        match self {
            Self::Empirical { samples } => mean_exp(samples, t),
            Self::GammaAnalytic { k, theta } => gamma_cf_unchecked(*k, *theta, t),
            Self::KdeCalibrated {
                calibration,
                bandwidth,
            } => mean_exp(calibration, t) * gaussian_damping(*bandwidth, t),
        }
    }

    /// Evaluates the characteristic function on every node of `grid`.
    pub fn series(&self, grid: &FrequencyGrid) -> ComplexSeries {
        match self {
            Self::Empirical { samples } => hermitian_ecf(samples, grid),
            Self::GammaAnalytic { k, theta } => {
                let half: Vec<_> = (0..=grid.center())
                    .map(|m| gamma_cf_unchecked(*k, *theta, grid.t(grid.center() + m)))
                    .collect();
                ComplexSeries::from_nonnegative_half(*grid, &half)
            }
            Self::KdeCalibrated {
                calibration,
                bandwidth,
            } => {
                let mut s = hermitian_ecf(calibration, grid);
                for (i, v) in s.values.iter_mut().enumerate() {
                    *v *= gaussian_damping(*bandwidth, grid.t(i));
                }
                s
            }
        }
    }

    /// Values on the uniform node set `start + m * step`, `m < count`.
    pub(crate) fn eval_uniform(&self, start: f64, step: f64, count: usize) -> Vec<Complex64> {
        match self {
            Self::Empirical { samples } => ecf_uniform(samples, start, step, count),
            Self::GammaAnalytic { k, theta } => (0..count)
                .map(|m| gamma_cf_unchecked(*k, *theta, start + m as f64 * step))
                .collect(),
            Self::KdeCalibrated {
                calibration,
                bandwidth,
            } => ecf_uniform(calibration, start, step, count)
                .into_iter()
                .enumerate()
                .map(|(m, v)| v * gaussian_damping(*bandwidth, start + m as f64 * step))
                .collect(),
        }
    }
}

/// The known law of the additive noise `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub cf: CharacteristicFunction,
    /// Polynomial decay exponent of `|cf(t)|`.
    pub nu: f64,
    pub cf_floor: f64,
}

impl NoiseModel {
    /// Gamma(k, theta) noise; the decay exponent is `k`.
    pub fn gamma(k: f64, theta: f64) -> Result<Self> {
        let cf = CharacteristicFunction::gamma(k, theta)?;
        Self::new(cf, k)
    }

    /// Noise law taken from a Gaussian KDE of a calibration sample. `bandwidth`
    /// defaults to Scott's rule; `nu` is a working decay exponent supplied by the caller.
    pub fn kde(calibration: Vec<f64>, bandwidth: Option<f64>, nu: f64) -> Result<Self> {
        let bandwidth = match bandwidth {
            Some(b) => b,
            None => default_bandwidth(&calibration)?,
        };
        Self::new(CharacteristicFunction::kde(calibration, bandwidth)?, nu)
    }

    pub fn new(cf: CharacteristicFunction, nu: f64) -> Result<Self> {
        if let CharacteristicFunction::Empirical { .. } = cf {
            return Err(Error::invalid(
                "cf",
                "an empirical characteristic function has no density and cannot describe the noise",
            ));
        }
        if !(nu.is_finite() && nu > 1.0) {
            return Err(Error::invalid("nu", format!("must exceed 1, got {nu}")));
        }
        Ok(Self {
            cf,
            nu,
            cf_floor: DEFAULT_CF_FLOOR,
        })
    }

    pub fn with_floor(mut self, cf_floor: f64) -> Result<Self> {
        self.cf_floor = positive("cf_floor", cf_floor)?;
        Ok(self)
    }

    pub fn density(&self, x: f64) -> f64 {
        match &self.cf {
            CharacteristicFunction::GammaAnalytic { k, theta } => {
                gamma_density_unchecked(*k, *theta, x)
            }
            CharacteristicFunction::KdeCalibrated {
                calibration,
                bandwidth,
            } => kde_density_unchecked(calibration, *bandwidth, x),
            CharacteristicFunction::Empirical { .. } => unreachable!("rejected by NoiseModel::new"),
        }
    }

    /// Support over which [`NoiseModel::density`] carries its mass.
    pub fn support(&self) -> (f64, f64) {
        match &self.cf {
            CharacteristicFunction::GammaAnalytic { k, theta } => {
                (0.0, theta * (k + 40.0 * k.sqrt() + 60.0))
            }
            CharacteristicFunction::KdeCalibrated {
                calibration,
                bandwidth,
            } => {
                let (lo, hi) = min_max(calibration);
                (lo - 12.0 * bandwidth, hi + 12.0 * bandwidth)
            }
            CharacteristicFunction::Empirical { .. } => unreachable!("rejected by NoiseModel::new"),
        }
    }

    /// Clamps the modulus of `phi_u` below at the floor, keeping its phase.
    pub fn floored(&self, phi_u: Complex64) -> Complex64 {
        let r = phi_u.norm();
        if r >= self.cf_floor {
            phi_u
        } else if r == 0.0 {
            Complex64::new(self.cf_floor, 0.0)
        } else {
            phi_u * (self.cf_floor / r)
        }
    }
}

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if samples.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("samples", "contains a non-finite value"));
    }
    Ok(())
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

fn gaussian_damping(bandwidth: f64, t: f64) -> f64 {
    (-0.5 * bandwidth * bandwidth * t * t).exp()
}

fn mean_exp(samples: &[f64], t: f64) -> Complex64 {
    let (re, im) = samples.iter().fold((0.0, 0.0), |(re, im), &z| {
        let (s, c) = (t * z).sin_cos();
        (re + c, im + s)
    });
    Complex64::new(re, im) / samples.len() as f64
}

const LANES: usize = 8;
const RESEED_EVERY: usize = 64;

/// Empirical characteristic function on `start + m * step`, `m < count`.
///
/// Phases advance by complex multiplication and are re-anchored with an exact
/// `sin_cos` every `RESEED_EVERY` nodes.
pub(crate) fn ecf_uniform(samples: &[f64], start: f64, step: f64, count: usize) -> Vec<Complex64> {
    let mut re = vec![0.0; count];
    let mut im = vec![0.0; count];
    for chunk in samples.chunks(LANES) {
        let mut ar = [0.0; LANES];
        let mut ai = [0.0; LANES];
        let mut wr = [0.0; LANES];
        let mut wi = [0.0; LANES];
        for (b, &z) in chunk.iter().enumerate() {
            let (s, c) = (step * z).sin_cos();
            wr[b] = c;
            wi[b] = s;
        }
        for m in 0..count {
            if m % RESEED_EVERY == 0 {
                let t = start + m as f64 * step;
                for (b, &z) in chunk.iter().enumerate() {
                    let (s, c) = (t * z).sin_cos();
                    ar[b] = c;
                    ai[b] = s;
                }
            }
            let mut sr = 0.0;
            let mut si = 0.0;
            for b in 0..LANES {
                sr += ar[b];
                si += ai[b];
                let nr = ar[b] * wr[b] - ai[b] * wi[b];
                let ni = ar[b] * wi[b] + ai[b] * wr[b];
                ar[b] = nr;
                ai[b] = ni;
            }
            re[m] += sr;
            im[m] += si;
        }
    }
    let n = samples.len() as f64;
    re.into_iter()
        .zip(im)
        .map(|(r, i)| Complex64::new(r / n, i / n))
        .collect()
}

fn hermitian_ecf(samples: &[f64], grid: &FrequencyGrid) -> ComplexSeries {
    let mut half = ecf_uniform(samples, 0.0, grid.step, grid.center() + 1);
    // exp(i*0*z) == 1 for every sample, so the mean is exactly one.
    half[0] = Complex64::new(1.0, 0.0);
    ComplexSeries::from_nonnegative_half(*grid, &half)
}

/// Empirical characteristic function `(1/n) sum exp(i t Z_k)` on `grid`.
pub fn empirical_cf(samples: &[f64], grid: &FrequencyGrid) -> Result<ComplexSeries> {
    check_samples(samples)?;
    Ok(hermitian_ecf(samples, grid))
}

/// Gamma(k, theta) characteristic function `(1 - i theta t)^(-k)`, principal branch.
pub fn gamma_cf(k: f64, theta: f64, t: f64) -> Result<Complex64> {
    positive("k", k)?;
    positive("theta", theta)?;
    Ok(gamma_cf_unchecked(k, theta, t))
}

fn gamma_cf_unchecked(k: f64, theta: f64, t: f64) -> Complex64 {
    if t == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    Complex64::new(1.0, -theta * t).powf(-k)
}

pub fn gamma_density(k: f64, theta: f64, x: f64) -> Result<f64> {
    positive("k", k)?;
    positive("theta", theta)?;
    Ok(gamma_density_unchecked(k, theta, x))
}

fn gamma_density_unchecked(k: f64, theta: f64, x: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    if x == 0.0 {
        return if k > 1.0 {
            0.0
        } else if k == 1.0 {
            1.0 / theta
        } else {
            f64::INFINITY
        };
    }
    ((k - 1.0) * x.ln() - x / theta - ln_gamma(k) - k * theta.ln()).exp()
}

/// Squared L2 mass of the Gamma characteristic function outside `[-t_cut, t_cut]`.
///
/// Uses `t = tan(phi) / theta`, which turns `(1 + theta^2 t^2)^(-k)` into
/// `cos^(2k-2)(phi) / theta` on a bounded interval.
pub fn gamma_cf_tail_energy(k: f64, theta: f64, t_cut: f64) -> Result<f64> {
    positive("k", k)?;
    positive("theta", theta)?;
    if k <= 0.5 {
        return Err(Error::invalid(
            "k",
            "the squared modulus is not integrable for k <= 1/2",
        ));
    }
    let lo = (theta * t_cut.max(0.0)).atan();
    let hi = PI / 2.0;
    let n = 4097;
    let step = (hi - lo) / (n - 1) as f64;
    let sum: f64 = (0..n)
        .map(|i| simpson_weight(i, n) * (lo + i as f64 * step).cos().powf(2.0 * k - 2.0))
        .sum();
    Ok(2.0 * sum * step / 3.0 / theta)
}

/// Characteristic function of a Gaussian KDE built on `calibration`.
pub fn kde_cf(calibration: &[f64], bandwidth: f64, t: f64) -> Result<Complex64> {
    check_samples(calibration)?;
    positive("bandwidth", bandwidth)?;
    Ok(mean_exp(calibration, t) * gaussian_damping(bandwidth, t))
}

pub fn kde_density(calibration: &[f64], bandwidth: f64, x: f64) -> Result<f64> {
    check_samples(calibration)?;
    positive("bandwidth", bandwidth)?;
    Ok(kde_density_unchecked(calibration, bandwidth, x))
}

fn kde_density_unchecked(calibration: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (calibration.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    let sum: f64 = calibration
        .iter()
        .map(|u| {
            let d = (x - u) / bandwidth;
            (-0.5 * d * d).exp()
        })
        .sum();
    norm * sum
}

/// Scott's rule: `m^(-1/5)` times the sample standard deviation.
pub fn default_bandwidth(calibration: &[f64]) -> Result<f64> {
    let m = calibration.len();
    if m < 2 {
        return Err(Error::invalid(
            "calibration",
            format!("needs at least 2 samples, got {m}"),
        ));
    }
    let mean = calibration.iter().sum::<f64>() / m as f64;
    let var = calibration.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let sd = var.sqrt();
    if sd.is_nan() || sd <= 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    Ok((m as f64).powf(-0.2) * sd)
}

#[inline]
pub(crate) fn simpson_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n - 1 {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

/// Composite Simpson estimate of the integral of the series over its grid.
pub fn simpson(series: &ComplexSeries) -> Result<Complex64> {
    let n = series.grid.n_points;
    if n.is_multiple_of(2) || n < 3 {
        return Err(Error::invalid(
            "n_points",
            format!("Simpson needs an odd node count of at least 3, got {n}"),
        ));
    }
    let sum: Complex64 = series
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| v * simpson_weight(i, n))
        .sum();
    Ok(sum * (series.grid.step / 3.0))
}

/// Quadrature weights for `n` equispaced nodes: Simpson for odd `n`, Simpson
/// plus a closing 3/8 panel for even `n >= 4`, trapezoid for two nodes.
pub(crate) fn quadrature_weights(n: usize, step: f64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    match n {
        0 | 1 => {}
        2 => {
            w[0] = 0.5 * step;
            w[1] = 0.5 * step;
        }
        _ if n % 2 == 1 => {
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = simpson_weight(i, n) * step / 3.0;
            }
        }
        _ => {
            let head = n - 3;
            if head >= 3 {
                for (i, wi) in w.iter_mut().take(head).enumerate() {
                    *wi = simpson_weight(i, head) * step / 3.0;
                }
            }
            for (o, c) in [1.0, 3.0, 3.0, 1.0].iter().enumerate() {
                w[head - 1 + o] += 3.0 * step / 8.0 * c;
            }
        }
    }
    w
}
