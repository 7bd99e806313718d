//! Adaptive plug-in estimation of the response density `f`.
//!
//! The first half of the sample estimates the atom weight (truncated below
//! `1 - tau_n`), the second half feeds the empirical characteristic function.
//! For every rung `j` of the smoothness ladder,
//!
//! ```text
//! Phi_X_j(t) = (Phi_Z_hat(t) / Phi_U(t) - p_j) / (1 - p_j) * 1{|t| <= 1/delta_j}
//! ```
//!
//! and the Lepskii rule picks a rung from the pairwise L2 distances between
//! these spectra. The chosen spectrum is inverted on an x-grid.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{positive, Error, Result};
use crate::estimate_p::{
    lepskii_index, p_hat_raw, PConfig, SmoothnessGrid, IMAG_TOLERANCE, MIN_SAMPLE,
};
use crate::kernels::FlatTopKernel;
use crate::spectral::{
    ecf_uniform, empirical_cf, quadrature_weights, simpson, ComplexSeries, FrequencyGrid,
    NoiseModel,
};

pub const DEFAULT_TRUNC_EXPONENT: f64 = 1.0;
pub const DEFAULT_X_POINTS: usize = 512;
/// Upper bound on the truncation level, so that `1 - tau` stays a usable clamp for tiny `n`.
pub const TAU_CAP: f64 = 0.5;
/// Posterior denominators below this are reported as undefined.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// Relative slack when deciding whether a node sits on the pass-band edge.
const EDGE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSample {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Order-preserving split after the first `floor(n/2)` observations.
pub fn split(samples: &[f64]) -> Result<SplitSample> {
    if samples.len() < MIN_SAMPLE {
        return Err(Error::SampleTooSmall(samples.len()));
    }
    let (first, second) = samples.split_at(samples.len() / 2);
    Ok(SplitSample {
        first: first.to_vec(),
        second: second.to_vec(),
    })
}

/// `min((log n)^-a, 1/2)`.
pub fn tau(n: usize, a: f64) -> Result<f64> {
    if n < MIN_SAMPLE {
        return Err(Error::SampleTooSmall(n));
    }
    positive("a", a)?;
    Ok((n as f64).ln().powf(-a).min(TAU_CAP))
}

pub(crate) fn clamp_split(raw: f64, tau: f64) -> f64 {
    raw.min(1.0 - tau).max(0.0)
}

/// Atom weight from the first half, clamped to `[0, 1 - tau]`.
pub fn p_hat_split(
    first: &[f64],
    noise: &NoiseModel,
    kernel: &FlatTopKernel,
    h: f64,
    tau: f64,
    quad_points: usize,
) -> Result<f64> {
    if !(tau > 0.0 && tau <= TAU_CAP) {
        return Err(Error::invalid(
            "tau",
            format!("must lie in (0, {TAU_CAP}], got {tau}"),
        ));
    }
    Ok(clamp_split(
        p_hat_raw(first, noise, kernel, h, quad_points)?,
        tau,
    ))
}

fn check_weight(p: f64) -> Result<()> {
    if p.is_nan() || p < 0.0 {
        return Err(Error::invalid("p", format!("must lie in [0, 1), got {p}")));
    }
    if p >= 1.0 {
        return Err(Error::DegenerateWeight(p));
    }
    Ok(())
}

#[inline]
fn in_passband(delta: f64, t: f64) -> bool {
    (delta * t).abs() <= 1.0 + EDGE_TOLERANCE
}

/// Plug-in spectrum of `X` from the second half of the sample on `grid`,
/// which must span `[-1/delta, 1/delta]`.
pub fn phi_x_hat(
    second: &[f64],
    noise: &NoiseModel,
    p1: f64,
    delta: f64,
    grid: &FrequencyGrid,
) -> Result<ComplexSeries> {
    let phi_z = empirical_cf(second, grid)?;
    phi_x_hat_from_series(&phi_z, noise, p1, delta)
}

/// Same plug-in, from any characteristic function of `Z` sampled on the pass-band.
pub fn phi_x_hat_from_series(
    phi_z: &ComplexSeries,
    noise: &NoiseModel,
    p1: f64,
    delta: f64,
) -> Result<ComplexSeries> {
    check_weight(p1)?;
    positive("delta", delta)?;
    let grid = phi_z.grid;
    if (grid.t_max * delta - 1.0).abs() > 1e-9 {
        return Err(Error::IncompatibleGrids(format!(
            "series spans [-{0}, {0}] but the pass-band is [-{1}, {1}]",
            grid.t_max,
            1.0 / delta
        )));
    }
    let phi_u = noise.cf.series(&grid);
    let values = phi_z
        .values
        .iter()
        .zip(&phi_u.values)
        .enumerate()
        .map(|(i, (z, u))| {
            if in_passband(delta, grid.t(i)) {
                (z / noise.floored(*u) - p1) / (1.0 - p1)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    ComplexSeries::new(grid, values)
}

/// `sqrt((1/2pi) * integral |a - b|^2 dt)`. Series on different supports must
/// share the node lattice; the narrower one is extended by zero.
pub fn l2_freq_distance(a: &ComplexSeries, b: &ComplexSeries) -> Result<f64> {
    let (narrow, wide) = if a.grid.t_max <= b.grid.t_max {
        (a, b)
    } else {
        (b, a)
    };
    let step = wide.grid.step;
    if ((narrow.grid.step - step) / step).abs() > 1e-9 {
        return Err(Error::IncompatibleGrids(format!(
            "steps differ: {} vs {}",
            narrow.grid.step, step
        )));
    }
    let offset_f = (wide.grid.t_max - narrow.grid.t_max) / step;
    let offset = offset_f.round();
    if (offset_f - offset).abs() > 1e-6 {
        return Err(Error::IncompatibleGrids(
            "the narrower support does not end on a node of the wider grid".into(),
        ));
    }
    let offset = offset as usize;
    let n_inner = narrow.grid.n_points;
    debug_assert_eq!(wide.grid.n_points, n_inner + 2 * offset);

    let segment = |range: std::ops::Range<usize>, f: &dyn Fn(usize) -> f64| -> f64 {
        let w = quadrature_weights(range.len(), step);
        range.zip(w).map(|(i, w)| w * f(i)).sum()
    };
    let outer = |i: usize| wide.values[i].norm_sqr();
    let inner = |i: usize| (narrow.values[i - offset] - wide.values[i]).norm_sqr();
    let total = segment(0..offset + 1, &outer)
        + segment(offset..offset + n_inner, &inner)
        + segment(offset + n_inner - 1..wide.grid.n_points, &outer);
    Ok((total / (2.0 * PI)).max(0.0).sqrt())
}

pub fn lepskii_select_f(per_j: &[ComplexSeries], rho: &[f64]) -> Result<usize> {
    if per_j.is_empty() {
        return Err(Error::DegenerateSeries("no candidate spectra".into()));
    }
    if per_j.len() != rho.len() {
        return Err(Error::invalid(
            "rho",
            "one penalty per candidate is required",
        ));
    }
    let mut dist = vec![vec![0.0; per_j.len()]; per_j.len()];
    for j in 0..per_j.len() {
        for l in (j + 1)..per_j.len() {
            let d = l2_freq_distance(&per_j[j], &per_j[l])?;
            dist[j][l] = d;
            dist[l][j] = d;
        }
    }
    Ok(lepskii_index(per_j.len(), rho, |j, l| dist[j][l]))
}

/// `f(x) = (1/2pi) * integral exp(-i t x) phi(t) dt` at every `x`.
pub fn invert_fourier(phi: &ComplexSeries, x_grid: &[f64]) -> Result<Vec<f64>> {
    let grid = phi.grid;
    let w = quadrature_weights(grid.n_points, grid.step);
    let weighted: Vec<(f64, Complex64)> = phi
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.re != 0.0 || v.im != 0.0)
        .map(|(i, v)| (grid.t(i), v * w[i]))
        .collect();
    let values: Vec<Complex64> = x_grid
        .par_iter()
        .map(|&x| {
            weighted
                .iter()
                .map(|&(t, v)| {
                    let (s, c) = (t * x).sin_cos();
                    v * Complex64::new(c, -s)
                })
                .sum::<Complex64>()
                / (2.0 * PI)
        })
        .collect();
    let max_re = values.iter().map(|v| v.re.abs()).fold(0.0, f64::max);
    let max_im = values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    if max_im > IMAG_TOLERANCE * max_re {
        return Err(Error::Numerical(format!(
            "inverse transform has imaginary residual {max_im:e} against peak {max_re:e}"
        )));
    }
    Ok(values.into_iter().map(|v| v.re).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FConfig {
    pub p: PConfig,
    /// Exponent `a` in `tau_n = (log n)^-a` and in the density penalty.
    pub trunc_exponent: f64,
    pub x_grid: Option<Vec<f64>>,
    pub x_points: usize,
}

impl FConfig {
    pub fn new(p: PConfig) -> Self {
        Self {
            p,
            trunc_exponent: DEFAULT_TRUNC_EXPONENT,
            x_grid: None,
            x_points: DEFAULT_X_POINTS,
        }
    }
}

/// Selected spectrum, its inversion, and the selection diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub selected_j: usize,
    pub delta_selected: f64,
    /// Estimated spectrum of `X` on `[-1/delta, 1/delta]`.
    pub phi_x: ComplexSeries,
    /// Empirical spectrum of the observations that fed `phi_x`, on the same grid.
    pub phi_z: ComplexSeries,
    pub x_grid: Vec<f64>,
    pub f_values: Vec<f64>,
    pub p_used: f64,
    /// Truncation level; absent when `p` was supplied.
    pub tau: Option<f64>,
    pub per_j_p: Vec<f64>,
    pub rho: Vec<f64>,
    pub per_j_l2: Vec<Vec<f64>>,
}

impl DensityEstimate {
    /// Half-width `1/delta` of the selected pass-band.
    pub fn passband(&self) -> f64 {
        1.0 / self.delta_selected
    }

    /// Relative gap between `integral f_hat^2 dx` over `[lo, hi]` (inverted on
    /// `points` nodes, odd) and `(1/2pi) integral |phi_x|^2 dt`.
    pub fn parseval_gap(&self, lo: f64, hi: f64, points: usize) -> Result<f64> {
        if hi.is_nan() || lo.is_nan() || hi <= lo || points < 3 || points.is_multiple_of(2) {
            return Err(Error::invalid(
                "points",
                "need hi > lo and an odd count of at least 3",
            ));
        }
        let step = (hi - lo) / (points - 1) as f64;
        let xs: Vec<f64> = (0..points).map(|i| lo + i as f64 * step).collect();
        let f = invert_fourier(&self.phi_x, &xs)?;
        let w = quadrature_weights(points, step);
        let x_energy: f64 = f.iter().zip(&w).map(|(v, w)| w * v * v).sum();
        let t_energy = spectral_energy(&self.phi_x)?;
        Ok((x_energy - t_energy).abs() / t_energy)
    }
}

/// `samples.len()` points spanning the bulk of the data plus three IQRs on each side.
pub fn default_x_grid(samples: &[f64], points: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if points < 2 {
        return Err(Error::invalid("x_points", "at least 2 points are required"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let (mut lo, mut hi) = (q(0.001) - 3.0 * iqr, q(0.999) + 3.0 * iqr);
    if hi <= lo {
        lo -= 1.0;
        hi += 1.0;
    }
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + i as f64 * step).collect())
}

pub fn estimate_f_adaptive(
    samples: &[f64],
    noise: &NoiseModel,
    config: &FConfig,
) -> Result<DensityEstimate> {
    let grid = ladder(samples.len(), noise, config)?;
    let halves = split(samples)?;
    let tau = tau(samples.len(), config.trunc_exponent)?;
    let p = &config.p;
    let weights = grid
        .entries
        .par_iter()
        .map(|e| p_hat_split(&halves.first, noise, &p.kernel, e.h, tau, p.quad_points))
        .collect::<Result<Vec<_>>>()?;
    let x_grid = resolve_x_grid(samples, config)?;
    estimate_with_weights(
        &halves.second,
        &weights,
        &grid,
        noise,
        p.quad_points,
        x_grid,
        Some(tau),
    )
}

/// Same pipeline with the atom weight fixed to `p`; the whole sample feeds the spectrum.
pub fn estimate_f_known_p(
    samples: &[f64],
    noise: &NoiseModel,
    p: f64,
    config: &FConfig,
) -> Result<DensityEstimate> {
    check_weight(p)?;
    let grid = ladder(samples.len(), noise, config)?;
    let weights = vec![p; grid.entries.len()];
    let x_grid = resolve_x_grid(samples, config)?;
    estimate_with_weights(
        samples,
        &weights,
        &grid,
        noise,
        config.p.quad_points,
        x_grid,
        None,
    )
}

fn ladder(n: usize, noise: &NoiseModel, config: &FConfig) -> Result<SmoothnessGrid> {
    SmoothnessGrid::build(
        n,
        config.p.s_max,
        config.p.eps,
        noise.nu,
        config.p.beta,
        config.trunc_exponent,
    )
}

fn resolve_x_grid(samples: &[f64], config: &FConfig) -> Result<Vec<f64>> {
    match &config.x_grid {
        Some(g) if g.is_empty() => Err(Error::invalid("x_grid", "must not be empty")),
        Some(g) => Ok(g.clone()),
        None => default_x_grid(samples, config.x_points),
    }
}

/// Running integrals over `|t| <= 1/delta_j` of `|R - 1|^2`, `|R|^2` and `Re R`,
/// where `R = Phi_Z_hat / Phi_U`. Pairwise spectrum distances are closed-form in these.
struct PassbandMoments {
    edges: Vec<f64>,
    dev_sq: Vec<f64>,
    abs_sq: Vec<f64>,
    re: Vec<f64>,
}

impl PassbandMoments {
    fn compute(sample: &[f64], noise: &NoiseModel, edges: Vec<f64>, quad_points: usize) -> Self {
        let half_intervals = ((quad_points.max(3) - 1) / 2) as f64;
        let span = *edges.last().expect("non-empty ladder");
        let mut lo = 0.0;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        let mut dev_sq = Vec::with_capacity(edges.len());
        let mut abs_sq = Vec::with_capacity(edges.len());
        let mut re = Vec::with_capacity(edges.len());
        for &hi in &edges {
            let len = hi - lo;
            let mut intervals = (half_intervals * len / span).round() as usize;
            intervals = (intervals + intervals % 2).max(2);
            let step = len / intervals as f64;
            let count = intervals + 1;
            let phi_z = ecf_uniform(sample, lo, step, count);
            let phi_u = noise.cf.eval_uniform(lo, step, count);
            let w = quadrature_weights(count, step);
            for i in 0..count {
                let r = phi_z[i] / noise.floored(phi_u[i]);
                a += 2.0 * w[i] * (r - 1.0).norm_sqr();
                b += 2.0 * w[i] * r.norm_sqr();
                c += 2.0 * w[i] * r.re;
            }
            dev_sq.push(a);
            abs_sq.push(b);
            re.push(c);
            lo = hi;
        }
        Self {
            edges,
            dev_sq,
            abs_sq,
            re,
        }
    }

    /// Distance between rungs `j < l` with weights `pj`, `pl`.
    fn distance(&self, j: usize, l: usize, pj: f64, pl: f64) -> f64 {
        let c = 1.0 / (1.0 - pj) - 1.0 / (1.0 - pl);
        let inner = c * c * self.dev_sq[j];
        let band = 2.0 * (self.edges[l] - self.edges[j]);
        let outer = (self.abs_sq[l] - self.abs_sq[j]) - 2.0 * pl * (self.re[l] - self.re[j])
            + pl * pl * band;
        let outer = outer.max(0.0) / ((1.0 - pl) * (1.0 - pl));
        ((inner + outer) / (2.0 * PI)).sqrt()
    }
}

pub(crate) fn estimate_with_weights(
    spectral_sample: &[f64],
    weights: &[f64],
    grid: &SmoothnessGrid,
    noise: &NoiseModel,
    quad_points: usize,
    x_grid: Vec<f64>,
    tau: Option<f64>,
) -> Result<DensityEstimate> {
    for &w in weights {
        check_weight(w)?;
    }
    let k = grid.entries.len();
    let edges: Vec<f64> = grid.entries.iter().map(|e| 1.0 / e.delta).collect();
    let moments = PassbandMoments::compute(spectral_sample, noise, edges, quad_points);
    let mut dist = vec![vec![0.0; k]; k];
    for j in 0..k {
        for l in (j + 1)..k {
            let d = moments.distance(j, l, weights[j], weights[l]);
            dist[j][l] = d;
            dist[l][j] = d;
        }
    }
    let rho = grid.rhos();
    let selected = lepskii_index(k, &rho, |j, l| dist[j][l]);

    let delta = grid.entries[selected].delta;
    let band = FrequencyGrid::symmetric(1.0 / delta, quad_points)?;
    let phi_z = empirical_cf(spectral_sample, &band)?;
    let phi_x = phi_x_hat_from_series(&phi_z, noise, weights[selected], delta)?;
    let f_values = invert_fourier(&phi_x, &x_grid)?;
    Ok(DensityEstimate {
        selected_j: selected,
        delta_selected: delta,
        phi_x,
        phi_z,
        x_grid,
        f_values,
        p_used: weights[selected],
        tau,
        per_j_p: weights.to_vec(),
        rho,
        per_j_l2: dist,
    })
}

/// `(f_hat * g)(z)` from the inverse transform of `Phi_X_hat * Phi_U` on the pass-band.
pub fn convolve_with_noise(
    density: &DensityEstimate,
    noise: &NoiseModel,
    z_grid: &[f64],
) -> Result<Vec<f64>> {
    let grid = density.phi_x.grid;
    let phi_u = noise.cf.series(&grid);
    let product = density
        .phi_x
        .values
        .iter()
        .zip(&phi_u.values)
        .map(|(x, u)| x * u)
        .collect();
    invert_fourier(&ComplexSeries::new(grid, product)?, z_grid)
}

fn check_unit(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("p", format!("must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// `P[A = 0 | Z = z] = p g(z) / (p g(z) + (1 - p) (f * g)(z))`, with the
/// convolution clipped at zero. `None` marks points with a vanishing denominator.
pub fn posterior_nonresponse(
    z_grid: &[f64],
    p: f64,
    noise: &NoiseModel,
    density: &DensityEstimate,
) -> Result<Vec<Option<f64>>> {
    check_unit(p)?;
    let conv = convolve_with_noise(density, noise, z_grid)?;
    Ok(z_grid
        .iter()
        .zip(conv)
        .map(|(&z, fg)| {
            let atom = p * noise.density(z);
            let denom = atom + (1.0 - p) * fg.max(0.0);
            (denom >= POSTERIOR_FLOOR).then(|| (atom / denom).clamp(0.0, 1.0))
        })
        .collect())
}

/// Fitted density of `Z`: `p g + (1 - p) (f_hat * g)`.
pub fn mixture_density(
    z_grid: &[f64],
    p: f64,
    noise: &NoiseModel,
    density: &DensityEstimate,
) -> Result<Vec<f64>> {
    check_unit(p)?;
    let conv = convolve_with_noise(density, noise, z_grid)?;
    Ok(z_grid
        .iter()
        .zip(conv)
        .map(|(&z, fg)| p * noise.density(z) + (1.0 - p) * fg)
        .collect())
}

/// Integral of `|phi|^2` over its grid, divided by `2 pi`.
pub fn spectral_energy(phi: &ComplexSeries) -> Result<f64> {
    let sq = phi
        .values
        .iter()
        .map(|v| Complex64::new(v.norm_sqr(), 0.0))
        .collect();
    Ok(simpson(&ComplexSeries::new(phi.grid, sq)?)?.re / (2.0 * PI))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{sinc_phi, sinc_x};
    use crate::spectral::{gamma_density, CharacteristicFunction, DEFAULT_QUAD_POINTS};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gamma_noise() -> NoiseModel {
        NoiseModel::gamma(2.0, 1.0).unwrap()
    }

    fn population(
        p: f64,
        signal: &CharacteristicFunction,
        noise: &NoiseModel,
        grid: FrequencyGrid,
    ) -> ComplexSeries {
        ComplexSeries::from_fn(grid, |t| {
            noise.cf.eval(t) * (p + (1.0 - p) * signal.eval(t))
        })
    }

    #[test]
    fn split_examples() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let s = split(&xs).unwrap();
        assert_eq!((s.first.len(), s.second.len()), (5, 5));
        let xs: Vec<f64> = (0..11).map(f64::from).collect();
        let s = split(&xs).unwrap();
        assert_eq!((s.first.len(), s.second.len()), (5, 6));
        assert_eq!([s.first, s.second].concat(), xs);
        assert!(matches!(split(&[1.0; 7]), Err(Error::SampleTooSmall(7))));
    }

    #[test]
    fn tau_examples() {
        assert_abs_diff_eq!(tau(12645, 1.0).unwrap(), 0.10588, epsilon = 1e-5);
        assert_abs_diff_eq!(tau(8, 1.0).unwrap(), 0.4809, epsilon = 1e-4);
        assert!(tau(1000, 60.0).unwrap() < 1e-40);
        assert!(tau(1000, 60.0).unwrap() > 0.0);
        assert_eq!(tau(8, 0.01).unwrap(), TAU_CAP);
        assert!(tau(8, 0.0).is_err());
    }

    #[test]
    fn split_clamp_examples() {
        assert_abs_diff_eq!(clamp_split(0.99, 0.1), 0.9);
        assert_eq!(clamp_split(-0.2, 0.1), 0.0);
        assert_eq!(clamp_split(0.5, 0.1), 0.5);
        let first = vec![1.0; 10];
        assert!(p_hat_split(
            &first,
            &gamma_noise(),
            &FlatTopKernel::default(),
            0.5,
            0.0,
            129
        )
        .is_err());
    }

    #[test]
    fn phi_x_at_origin_is_one() {
        let grid = FrequencyGrid::symmetric(2.0, 101).unwrap();
        let z: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() + 3.0).collect();
        for &p in &[0.0, 0.3, 0.9] {
            let phi = phi_x_hat(&z, &gamma_noise(), p, 0.5, &grid).unwrap();
            assert_eq!(phi.values[grid.center()], Complex64::new(1.0, 0.0));
        }
        assert!(matches!(
            phi_x_hat(&z, &gamma_noise(), 1.0, 0.5, &grid),
            Err(Error::DegenerateWeight(_))
        ));
    }

    #[test]
    fn phi_x_without_atom_is_plain_deconvolution() {
        let grid = FrequencyGrid::symmetric(2.0, 101).unwrap();
        let noise = gamma_noise();
        let z: Vec<f64> = (0..50)
            .map(|i| (i as f64 * 0.37).cos() * 2.0 + 3.0)
            .collect();
        let phi = phi_x_hat(&z, &noise, 0.0, 0.5, &grid).unwrap();
        let ecf = empirical_cf(&z, &grid).unwrap();
        for i in 0..grid.n_points {
            let expected = ecf.values[i] / noise.cf.eval(grid.t(i)) * sinc_phi(0.5 * grid.t(i));
            assert!((phi.values[i] - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn phi_x_population_identity() {
        let noise = gamma_noise();
        let signal = CharacteristicFunction::gamma(4.0, 1.0).unwrap();
        let grid = FrequencyGrid::symmetric(5.0, 401).unwrap();
        let phi = phi_x_hat_from_series(&population(0.6, &signal, &noise, grid), &noise, 0.6, 0.2)
            .unwrap();
        for (i, t) in grid.points().enumerate() {
            assert!((phi.values[i] - signal.eval(t)).norm() < 1e-10);
        }
    }

    #[test]
    fn l2_distance_examples() {
        let g = FrequencyGrid::symmetric(1.0, 201).unwrap();
        let a = ComplexSeries::from_fn(g, |t| Complex64::new(t.cos(), t));
        assert_eq!(l2_freq_distance(&a, &a).unwrap(), 0.0);
        let c = 1.7;
        let konst = ComplexSeries::from_fn(g, |_| Complex64::new(c, 0.0));
        let zero = ComplexSeries::from_fn(g, |_| Complex64::new(0.0, 0.0));
        assert_abs_diff_eq!(
            l2_freq_distance(&konst, &zero).unwrap(),
            c / PI.sqrt(),
            epsilon = 1e-12
        );

        // A constant on [-1, 1] against zero on [-1.5, 1.5] sharing the lattice.
        let wide = FrequencyGrid::symmetric(1.5, 301).unwrap();
        let zero_wide = ComplexSeries::from_fn(wide, |_| Complex64::new(0.0, 0.0));
        assert_abs_diff_eq!(
            l2_freq_distance(&konst, &zero_wide).unwrap(),
            c / PI.sqrt(),
            epsilon = 1e-12
        );
        let one_wide = ComplexSeries::from_fn(wide, |_| Complex64::new(1.0, 0.0));
        // |c - 1|^2 on [-1,1] plus 1 on the two outer bands of width 0.5.
        let expected = (((c - 1.0) * (c - 1.0) * 2.0 + 1.0) / (2.0 * PI)).sqrt();
        assert_abs_diff_eq!(
            l2_freq_distance(&konst, &one_wide).unwrap(),
            expected,
            epsilon = 1e-12
        );

        let off = FrequencyGrid::symmetric(1.2345, 301).unwrap();
        let z = ComplexSeries::from_fn(off, |_| Complex64::new(0.0, 0.0));
        assert!(matches!(
            l2_freq_distance(&konst, &z),
            Err(Error::IncompatibleGrids(_))
        ));
    }

    #[test]
    fn lepskii_f_examples() {
        let g = FrequencyGrid::symmetric(1.0, 101).unwrap();
        let same: Vec<_> = (0..3)
            .map(|_| ComplexSeries::from_fn(g, |t| Complex64::new(t.cos(), 0.0)))
            .collect();
        assert_eq!(lepskii_select_f(&same, &[0.1, 0.2, 0.3]).unwrap(), 0);

        // Constants 0, 0, c with |c|/sqrt(pi) = 0.9 mirror the scalar hand trace.
        let c = 0.9 * PI.sqrt();
        let series: Vec<_> = [0.0, 0.0, c]
            .iter()
            .map(|&v| ComplexSeries::from_fn(g, move |_| Complex64::new(v, 0.0)))
            .collect();
        assert_eq!(lepskii_select_f(&series, &[0.1, 0.2, 0.3]).unwrap(), 2);
        assert_eq!(lepskii_select_f(&series, &[0.1, 0.2, 0.95]).unwrap(), 0);
        // Distances above every penalty fall back to the last index.
        let far: Vec<_> = (0..4)
            .map(|k| ComplexSeries::from_fn(g, move |_| Complex64::new(10.0 * k as f64, 0.0)))
            .collect();
        assert_eq!(lepskii_select_f(&far, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 3);
        assert!(lepskii_select_f(&[], &[]).is_err());
    }

    #[test]
    fn inversion_examples() {
        let g = FrequencyGrid::symmetric(1.0, DEFAULT_QUAD_POINTS).unwrap();
        let window = ComplexSeries::from_fn(g, |t| Complex64::new(sinc_phi(t), 0.0));
        let xs: Vec<f64> = (0..40).map(|i| -20.0 + i as f64 * 1.03).collect();
        for (x, f) in xs.iter().zip(invert_fourier(&window, &xs).unwrap()) {
            assert_abs_diff_eq!(f, sinc_x(*x), epsilon = 1e-6);
        }
        let zero = ComplexSeries::from_fn(g, |_| Complex64::new(0.0, 0.0));
        assert!(invert_fourier(&zero, &xs)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));

        let signal = CharacteristicFunction::gamma(4.0, 1.0).unwrap();
        let g = FrequencyGrid::symmetric(50.0, DEFAULT_QUAD_POINTS).unwrap();
        let phi = signal.series(&g);
        let xs: Vec<f64> = (0..=300).map(|i| i as f64 * 0.05).collect();
        let f = invert_fourier(&phi, &xs).unwrap();
        let sup = xs
            .iter()
            .zip(&f)
            .map(|(x, v)| (v - gamma_density(4.0, 1.0, *x).unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(sup < 1e-3, "sup error {sup}");
    }

    #[test]
    fn fast_distances_match_zero_extended_series() {
        let noise = gamma_noise();
        let z: Vec<f64> = (0..300)
            .map(|i| 2.0 + 1.5 * ((i * 7919 % 300) as f64 / 300.0 - 0.5) * 4.0)
            .collect();
        let grid = SmoothnessGrid::build(z.len(), 2.0, 0.5, 2.0, 9.0, 1.0).unwrap();
        let weights: Vec<f64> = (0..grid.entries.len())
            .map(|j| 0.1 + 0.05 * (j % 5) as f64)
            .collect();
        let edges: Vec<f64> = grid.entries.iter().map(|e| 1.0 / e.delta).collect();
        let moments = PassbandMoments::compute(&z, &noise, edges.clone(), 8001);

        // Zero-extended spectra on one shared lattice fine enough to make the
        // edge misplacement negligible.
        let step = 2e-4;
        let materialize = |j: usize| {
            let m = (edges[j] / step).floor() as usize;
            let g = FrequencyGrid::symmetric(m as f64 * step, 2 * m + 1).unwrap();
            let phi_z = empirical_cf(&z, &g).unwrap();
            let delta = 1.0 / (m as f64 * step);
            phi_x_hat_from_series(&phi_z, &noise, weights[j], delta).unwrap()
        };
        let k = grid.entries.len();
        for &(j, l) in &[(0, 1), (0, k - 1), (2, 5), (k - 2, k - 1)] {
            let generic = l2_freq_distance(&materialize(j), &materialize(l)).unwrap();
            let fast = moments.distance(j, l, weights[j], weights[l]);
            assert!(
                (generic - fast).abs() < 2e-3 * fast.max(1e-3),
                "{j},{l}: {generic} vs {fast}"
            );
        }
    }

    #[test]
    fn known_p_equals_adaptive_core_with_forced_weights() {
        let noise = gamma_noise();
        let z: Vec<f64> = (0..64)
            .map(|i| 2.0 + ((i * 37 % 64) as f64) / 10.0)
            .collect();
        let config = FConfig::new(PConfig::new(3.0, 0.5, 9.0).unwrap().with_quad_points(513));
        let known = estimate_f_known_p(&z, &noise, 0.4, &config).unwrap();
        let grid = SmoothnessGrid::build(z.len(), 3.0, 0.5, 2.0, 9.0, 1.0).unwrap();
        let core = estimate_with_weights(
            &z,
            &vec![0.4; grid.entries.len()],
            &grid,
            &noise,
            513,
            default_x_grid(&z, DEFAULT_X_POINTS).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(known, core);
        assert!(estimate_f_known_p(&z, &noise, 1.0, &config).is_err());
    }

    #[test]
    fn posterior_limits() {
        let noise = gamma_noise();
        let z: Vec<f64> = (0..200)
            .map(|i| 1.0 + ((i * 53 % 200) as f64) / 25.0)
            .collect();
        let config = FConfig::new(PConfig::new(3.0, 0.5, 9.0).unwrap().with_quad_points(513));
        let est = estimate_f_known_p(&z, &noise, 0.5, &config).unwrap();
        let zs: Vec<f64> = (0..60).map(|i| -1.0 + i as f64 * 0.25).collect();

        let post = posterior_nonresponse(&zs, 1.0, &noise, &est).unwrap();
        for (zv, v) in zs.iter().zip(&post) {
            if noise.density(*zv) > 0.0 {
                assert_eq!(*v, Some(1.0));
            }
        }
        let conv = convolve_with_noise(&est, &noise, &zs).unwrap();
        let post = posterior_nonresponse(&zs, 0.0, &noise, &est).unwrap();
        for (c, v) in conv.iter().zip(&post) {
            if *c > POSTERIOR_FLOOR {
                assert_eq!(*v, Some(0.0));
            }
        }
        let post = posterior_nonresponse(&zs, 0.5, &noise, &est).unwrap();
        for ((zv, c), v) in zs.iter().zip(&conv).zip(&post) {
            match v {
                Some(v) => {
                    assert!((0.0..=1.0).contains(v));
                    let g = noise.density(*zv);
                    let expected = g / (g + c.max(0.0));
                    assert_abs_diff_eq!(*v, expected, epsilon = 1e-12);
                }
                None => assert!(0.5 * noise.density(*zv) + 0.5 * c.max(0.0) < POSTERIOR_FLOOR),
            }
        }
        assert!(posterior_nonresponse(&zs, 1.5, &noise, &est).is_err());
    }

    #[test]
    fn posterior_symmetric_crossing_is_one_half() {
        // Build an estimate whose convolution with the noise equals g itself:
        // Phi_X = 1 on a wide band makes f * g ~ g.
        let noise = NoiseModel::gamma(4.0, 1.0).unwrap();
        let g = FrequencyGrid::symmetric(60.0, DEFAULT_QUAD_POINTS).unwrap();
        let phi_x = ComplexSeries::from_fn(g, |_| Complex64::new(1.0, 0.0));
        let est = DensityEstimate {
            selected_j: 0,
            delta_selected: 1.0 / 60.0,
            phi_z: phi_x.clone(),
            phi_x,
            x_grid: vec![],
            f_values: vec![],
            p_used: 0.5,
            tau: None,
            per_j_p: vec![0.5],
            rho: vec![1.0],
            per_j_l2: vec![vec![0.0]],
        };
        let post = posterior_nonresponse(&[3.0], 0.5, &noise, &est).unwrap();
        assert_abs_diff_eq!(post[0].unwrap(), 0.5, epsilon = 1e-4);
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 1.0 + ((i * 7919 % n) as f64) * 8.0 / n as f64)
            .collect()
    }

    #[test]
    fn point_mass_data_leaves_negative_lobes() {
        let noise = gamma_noise();
        let z: Vec<f64> = (0..200).map(|i| 5.0 + 1e-3 * (i % 7) as f64).collect();
        let config = FConfig {
            x_grid: Some((0..400).map(|i| -5.0 + i as f64 * 0.05).collect()),
            ..FConfig::new(PConfig::new(3.0, 0.5, 9.0).unwrap().with_quad_points(1025))
        };
        let est = estimate_f_known_p(&z, &noise, 0.0, &config).unwrap();
        let min = est.f_values.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min < -1e-3, "min {min}");
        assert_eq!(
            est.f_values,
            invert_fourier(&est.phi_x, &est.x_grid).unwrap()
        );
    }

    #[test]
    fn pure_noise_hits_the_clamp() {
        let noise = gamma_noise();
        let spec_like: Vec<f64> = (0..400)
            .map(|i| 2.0 + 1.3 * ((i as f64) * 0.61).sin())
            .collect();
        let config = FConfig::new(PConfig::new(3.0, 0.5, 9.0).unwrap().with_quad_points(513));
        let est = estimate_f_adaptive(&spec_like, &noise, &config).unwrap();
        let tau = tau(400, 1.0).unwrap();
        assert!(est.per_j_p.iter().all(|&p| p <= 1.0 - tau));
        assert!(est.f_values.iter().all(|v| v.is_finite()));
        assert_eq!(est.tau, Some(tau));
    }

    #[test]
    fn halves_are_used_independently() {
        let noise = gamma_noise();
        let z = ramp(200);
        let config = FConfig::new(PConfig::new(3.0, 0.5, 9.0).unwrap().with_quad_points(513));
        let base = estimate_f_adaptive(&z, &noise, &config).unwrap();

        let mut second_changed = z.clone();
        for v in &mut second_changed[100..] {
            *v += 0.37;
        }
        let est = estimate_f_adaptive(&second_changed, &noise, &config).unwrap();
        assert!(base
            .per_j_p
            .iter()
            .zip(&est.per_j_p)
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut first_changed = z.clone();
        for v in &mut first_changed[..100] {
            *v *= 1.5;
        }
        let est = estimate_f_adaptive(&first_changed, &noise, &config).unwrap();
        assert_ne!(base.per_j_p, est.per_j_p);
        let reference = empirical_cf(&z[100..], &est.phi_z.grid).unwrap();
        assert!(est
            .phi_z
            .values
            .iter()
            .zip(&reference.values)
            .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()));
    }

    #[test]
    fn pipeline_output_is_parseval_consistent() {
        let noise = gamma_noise();
        let config = FConfig::new(PConfig::new(3.0, 0.5, 9.0).unwrap().with_quad_points(1025));
        for est in [
            estimate_f_adaptive(&ramp(300), &noise, &config).unwrap(),
            estimate_f_known_p(&ramp(300), &noise, 0.6, &config).unwrap(),
        ] {
            // The quadrature inverse is periodic in x with period 2pi/dt; stay inside one period.
            let half = 0.9 * PI / est.phi_x.grid.step;
            let points = ((8.0 * half * est.passband() / PI) as usize) | 1;
            let gap = est.parseval_gap(-half, half, points).unwrap();
            assert!(gap < 1e-3, "gap {gap}");
        }
    }

    proptest! {
        #[test]
        fn l2_is_a_metric(
            a in proptest::collection::vec(-2.0f64..2.0, 4),
            b in proptest::collection::vec(-2.0f64..2.0, 4),
            c in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let g = FrequencyGrid::symmetric(3.0, 121).unwrap();
            let mk = |v: &Vec<f64>| {
                let v = v.clone();
                ComplexSeries::from_fn(g, move |t| Complex64::new(v[0] + v[1] * t.cos(), v[2] * t.sin() + v[3]))
            };
            let (sa, sb, sc) = (mk(&a), mk(&b), mk(&c));
            let ab = l2_freq_distance(&sa, &sb).unwrap();
            let bc = l2_freq_distance(&sb, &sc).unwrap();
            let ac = l2_freq_distance(&sa, &sc).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!((ab - l2_freq_distance(&sb, &sa).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn lepskii_f_scale_invariant(
            vals in proptest::collection::vec(-1.0f64..1.0, 2..8),
            scale in 0.05f64..20.0,
        ) {
            let g = FrequencyGrid::symmetric(1.0, 41).unwrap();
            let series: Vec<_> = vals.iter().map(|&v| ComplexSeries::from_fn(g, move |_| Complex64::new(v, 0.0))).collect();
            let rho: Vec<f64> = (1..=vals.len()).map(|i| 0.15 * i as f64).collect();
            let scaled: Vec<_> = vals.iter().map(|&v| ComplexSeries::from_fn(g, move |_| Complex64::new(v * scale, 0.0))).collect();
            let rho_s: Vec<f64> = rho.iter().map(|r| r * scale).collect();
            prop_assert_eq!(lepskii_select_f(&series, &rho).unwrap(), lepskii_select_f(&scaled, &rho_s).unwrap());
        }
    }
}
