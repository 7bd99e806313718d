//! Sampling from `Z = U + A X` and the Monte-Carlo study harness.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{positive, Error, Result};
use crate::estimate_f::{
    estimate_f_adaptive, estimate_f_known_p, DensityEstimate, FConfig, DEFAULT_TRUNC_EXPONENT,
};
use crate::estimate_p::{default_beta, default_eps, estimate_p_adaptive, PConfig, DEFAULT_S_MAX};
use crate::kernels::{FlatTopKernel, DEFAULT_KERNEL_A, DEFAULT_KERNEL_M};
use crate::spectral::{
    gamma_cf, gamma_cf_tail_energy, simpson, ComplexSeries, NoiseModel, DEFAULT_QUAD_POINTS,
};

/// Atom weight shared by both reference datasets.
pub const DATASET_P: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaLaw {
    pub k: f64,
    pub theta: f64,
}

impl GammaLaw {
    pub fn new(k: f64, theta: f64) -> Result<Self> {
        positive("k", k)?;
        positive("theta", theta)?;
        Ok(Self { k, theta })
    }

    fn sampler(&self) -> Result<Gamma<f64>> {
        Gamma::new(self.k, self.theta).map_err(|e| Error::invalid("gamma", e.to_string()))
    }

    pub fn mean(&self) -> f64 {
        self.k * self.theta
    }

    pub fn variance(&self) -> f64 {
        self.k * self.theta * self.theta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Gamma {
        k: f64,
        theta: f64,
    },
    /// Draws from the Gaussian KDE of a calibration sample.
    Kde {
        calibration: Vec<f64>,
        bandwidth: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `P[A = 0]`.
    pub p: f64,
    pub noise: NoiseSpec,
    pub signal: GammaLaw,
    pub n: usize,
    pub seed: u64,
}

impl ModelSpec {
    /// Reference designs. Dataset 1: `U ~ Gamma(2, 1)`, `X ~ Gamma(gamma, 1)`.
    /// Dataset 2: `U ~ Gamma(gamma, 1)`, `X ~ Gamma(2, 1)`. Both use `p = 0.6`.
    pub fn dataset(id: u8, gamma: f64, n: usize, seed: u64) -> Result<Self> {
        positive("gamma", gamma)?;
        let (noise, signal) = match id {
            1 => (2.0, gamma),
            2 => (gamma, 2.0),
            _ => {
                return Err(Error::invalid(
                    "dataset",
                    format!("must be 1 or 2, got {id}"),
                ))
            }
        };
        let spec = Self {
            p: DATASET_P,
            noise: NoiseSpec::Gamma {
                k: noise,
                theta: 1.0,
            },
            signal: GammaLaw::new(signal, 1.0)?,
            n,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(
                "p",
                format!("must lie in [0, 1], got {}", self.p),
            ));
        }
        if self.n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        GammaLaw::new(self.signal.k, self.signal.theta)?;
        match &self.noise {
            NoiseSpec::Gamma { k, theta } => {
                GammaLaw::new(*k, *theta)?;
            }
            NoiseSpec::Kde {
                calibration,
                bandwidth,
            } => {
                if calibration.is_empty() {
                    return Err(Error::EmptySample);
                }
                positive("bandwidth", *bandwidth)?;
            }
        }
        Ok(())
    }

    /// Noise model for estimation. Gamma noise carries its own decay exponent;
    /// KDE noise needs one from the caller.
    pub fn noise_model(&self, nu: Option<f64>) -> Result<NoiseModel> {
        match &self.noise {
            NoiseSpec::Gamma { k, theta } => NoiseModel::gamma(*k, *theta),
            NoiseSpec::Kde {
                calibration,
                bandwidth,
            } => {
                let nu = nu.ok_or_else(|| Error::invalid("nu", "required for calibrated noise"))?;
                NoiseModel::kde(calibration.clone(), Some(*bandwidth), nu)
            }
        }
    }

    /// `Phi_Z(t) = Phi_U(t) (p + (1 - p) Phi_X(t))`.
    pub fn population_cf(&self, t: f64) -> Result<Complex64> {
        let phi_u = self.noise_model(Some(2.0))?.cf.eval(t);
        let phi_x = gamma_cf(self.signal.k, self.signal.theta, t)?;
        Ok(phi_u * (self.p + (1.0 - self.p) * phi_x))
    }

    fn noise_moments(&self) -> (f64, f64) {
        match &self.noise {
            NoiseSpec::Gamma { k, theta } => (k * theta, k * theta * theta),
            NoiseSpec::Kde {
                calibration,
                bandwidth,
            } => {
                let m = calibration.len() as f64;
                let mean = calibration.iter().sum::<f64>() / m;
                let var = calibration
                    .iter()
                    .map(|c| (c - mean) * (c - mean))
                    .sum::<f64>()
                    / m;
                (mean, var + bandwidth * bandwidth)
            }
        }
    }

    /// `E[Z] = E[U] + (1 - p) E[X]`.
    pub fn mean(&self) -> f64 {
        self.noise_moments().0 + (1.0 - self.p) * self.signal.mean()
    }

    /// `Var(Z) = Var(U) + p (1 - p) E[X]^2 + (1 - p) Var(X)`.
    pub fn variance(&self) -> f64 {
        let ex = self.signal.mean();
        self.noise_moments().1
            + self.p * (1.0 - self.p) * ex * ex
            + (1.0 - self.p) * self.signal.variance()
    }
}

/// `n` draws of `Z`, bit-reproducible for a given spec.
pub fn sample_model(spec: &ModelSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signal = spec.signal.sampler()?;
    let respond = 1.0 - spec.p;
    match &spec.noise {
        NoiseSpec::Gamma { k, theta } => {
            let noise = GammaLaw::new(*k, *theta)?.sampler()?;
            Ok((0..spec.n)
                .map(|_| {
                    let u = noise.sample(&mut rng);
                    let a = rng.random_bool(respond);
                    if a {
                        u + signal.sample(&mut rng)
                    } else {
                        u
                    }
                })
                .collect())
        }
        NoiseSpec::Kde {
            calibration,
            bandwidth,
        } => Ok((0..spec.n)
            .map(|_| {
                let centre = calibration[rng.random_range(0..calibration.len())];
                let eps: f64 = StandardNormal.sample(&mut rng);
                let u = centre + bandwidth * eps;
                if rng.random_bool(respond) {
                    u + signal.sample(&mut rng)
                } else {
                    u
                }
            })
            .collect()),
    }
}

/// `||f_hat - f||_2` for a Gamma target, in the frequency domain: the pass-band
/// part by quadrature, the discarded tails in closed form.
pub fn l2_error_gamma(estimate: &DensityEstimate, target: &GammaLaw) -> Result<f64> {
    let grid = estimate.phi_x.grid;
    let diff = estimate
        .phi_x
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let d = v - gamma_cf(target.k, target.theta, grid.t(i))?;
            Ok(Complex64::new(d.norm_sqr(), 0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let inner = simpson(&ComplexSeries::new(grid, diff)?)?.re;
    let tail = gamma_cf_tail_energy(target.k, target.theta, grid.t_max)?;
    Ok(((inner + tail) / (2.0 * PI)).max(0.0).sqrt())
}

fn default_datasets() -> Vec<u8> {
    vec![1]
}
fn default_replications() -> usize {
    100
}
fn default_eps_value() -> f64 {
    0.5
}
fn default_beta_value() -> f64 {
    9.0
}
fn default_s_max() -> f64 {
    DEFAULT_S_MAX
}
fn default_kernel_a() -> f64 {
    DEFAULT_KERNEL_A
}
fn default_kernel_m() -> f64 {
    DEFAULT_KERNEL_M
}
fn default_quad_points() -> usize {
    DEFAULT_QUAD_POINTS
}
fn default_trunc() -> f64 {
    DEFAULT_TRUNC_EXPONENT
}
fn yes() -> bool {
    true
}

/// Which density estimator the study scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FMode {
    /// `p` estimated from the first half of each sample.
    Adaptive,
    /// `p` fixed to its true value.
    KnownP,
}

/// Study configuration; also the JSON document read by `mc-study`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McStudy {
    #[serde(default = "default_datasets")]
    pub datasets: Vec<u8>,
    pub gammas: Vec<f64>,
    pub n_values: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// `None` selects the calibrated default for the noise of each cell.
    #[serde(default = "default_beta_opt")]
    pub beta: Option<f64>,
    #[serde(default = "default_eps_opt")]
    pub eps: Option<f64>,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
    #[serde(default = "default_kernel_a")]
    pub kernel_a: f64,
    #[serde(default = "default_kernel_m")]
    pub kernel_m: f64,
    #[serde(default = "default_quad_points")]
    pub quad_points: usize,
    #[serde(default = "default_trunc")]
    pub trunc_exponent: f64,
    #[serde(default = "yes")]
    pub estimate_p: bool,
    /// Also score the density estimator in this mode.
    #[serde(default)]
    pub estimate_f: Option<FMode>,
}

fn default_beta_opt() -> Option<f64> {
    Some(default_beta_value())
}
fn default_eps_opt() -> Option<f64> {
    Some(default_eps_value())
}

impl McStudy {
    pub fn new(
        datasets: Vec<u8>,
        gammas: Vec<f64>,
        n_values: Vec<usize>,
        replications: usize,
        seed: u64,
    ) -> Self {
        Self {
            datasets,
            gammas,
            n_values,
            replications,
            seed,
            beta: default_beta_opt(),
            eps: default_eps_opt(),
            s_max: default_s_max(),
            kernel_a: default_kernel_a(),
            kernel_m: default_kernel_m(),
            quad_points: default_quad_points(),
            trunc_exponent: default_trunc(),
            estimate_p: true,
            estimate_f: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications", "must be at least 1"));
        }
        if self.datasets.is_empty() || self.gammas.is_empty() || self.n_values.is_empty() {
            return Err(Error::invalid(
                "study",
                "datasets, gammas and n_values must be non-empty",
            ));
        }
        if !self.estimate_p && self.estimate_f.is_none() {
            return Err(Error::invalid("study", "nothing to estimate"));
        }
        for &d in &self.datasets {
            for &g in &self.gammas {
                ModelSpec::dataset(d, g, 1, 0)?;
            }
        }
        for &n in &self.n_values {
            if n < crate::estimate_p::MIN_SAMPLE {
                return Err(Error::SampleTooSmall(n));
            }
        }
        self.p_config(2.0)?;
        positive("trunc_exponent", self.trunc_exponent)?;
        Ok(())
    }

    /// Estimator settings for noise with decay exponent `nu`.
    pub fn p_config(&self, nu: f64) -> Result<PConfig> {
        let beta = self.beta.unwrap_or_else(|| default_beta(self.s_max, nu));
        let eps = self
            .eps
            .unwrap_or_else(|| default_eps(beta, self.s_max, nu));
        Ok(PConfig::new(self.s_max, eps, beta)?
            .with_kernel(FlatTopKernel::new(self.kernel_a, self.kernel_m)?)
            .with_quad_points(self.quad_points))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub dataset: u8,
    pub gamma: f64,
    pub n: usize,
    pub replications: usize,
    pub mse_p: Option<f64>,
    pub mean_l2_f: Option<f64>,
    /// Log-log slope of the series this row belongs to.
    pub slope: Option<f64>,
}

/// Per-replication outcome, kept for callers that need more than the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub seed: u64,
    pub p_hat: Option<f64>,
    pub l2_f: Option<f64>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of a study cell; replication `r` uses `cell_seed ^ r`.
pub fn cell_seed(base: u64, dataset: u8, gamma: f64, n: usize) -> u64 {
    splitmix(splitmix(splitmix(base ^ u64::from(dataset)) ^ gamma.to_bits()) ^ n as u64)
}

/// Runs every replication of one cell, in parallel, returned in replication order.
pub fn run_cell(study: &McStudy, dataset: u8, gamma: f64, n: usize) -> Result<Vec<Replication>> {
    let base = cell_seed(study.seed, dataset, gamma, n);
    let template = ModelSpec::dataset(dataset, gamma, n, base)?;
    let noise = template.noise_model(None)?;
    let p_config = study.p_config(noise.nu)?;
    let f_config = FConfig {
        trunc_exponent: study.trunc_exponent,
        ..FConfig::new(p_config)
    };
    (0..study.replications as u64)
        .into_par_iter()
        .map(|r| {
            let spec = ModelSpec {
                seed: base ^ r,
                ..template.clone()
            };
            let z = sample_model(&spec)?;
            let p_hat = if study.estimate_p {
                Some(estimate_p_adaptive(&z, &noise, &p_config)?.value)
            } else {
                None
            };
            let l2_f = match study.estimate_f {
                None => None,
                Some(mode) => {
                    // The error is scored in the frequency domain; skip the inversion grid.
                    let fc = FConfig {
                        x_grid: Some(vec![0.0]),
                        ..f_config.clone()
                    };
                    let est = match mode {
                        FMode::Adaptive => estimate_f_adaptive(&z, &noise, &fc)?,
                        FMode::KnownP => estimate_f_known_p(&z, &noise, spec.p, &fc)?,
                    };
                    Some(l2_error_gamma(&est, &spec.signal)?)
                }
            };
            Ok(Replication {
                seed: spec.seed,
                p_hat,
                l2_f,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Numerical(format!("cell dataset={dataset} gamma={gamma} n={n}: {e}")))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    sum / count as f64
}

/// Runs the whole study; rows are ordered by dataset, gamma, then n as configured.
pub fn mc_study(study: &McStudy) -> Result<Vec<McRow>> {
    study.validate()?;
    let mut rows = Vec::new();
    for &dataset in &study.datasets {
        for &gamma in &study.gammas {
            let first = rows.len();
            for &n in &study.n_values {
                let reps = run_cell(study, dataset, gamma, n)?;
                let mse_p = study
                    .estimate_p
                    .then(|| mean(reps.iter().map(|r| (r.p_hat.unwrap() - DATASET_P).powi(2))));
                let mean_l2_f = study
                    .estimate_f
                    .map(|_| mean(reps.iter().map(|r| r.l2_f.unwrap())));
                rows.push(McRow {
                    dataset,
                    gamma,
                    n,
                    replications: study.replications,
                    mse_p,
                    mean_l2_f,
                    slope: None,
                });
            }
            let series = &mut rows[first..];
            let ns: Vec<f64> = series.iter().map(|r| r.n as f64).collect();
            let ys: Vec<f64> = series
                .iter()
                .map(|r| r.mse_p.or(r.mean_l2_f).unwrap())
                .collect();
            let slope = rate_fit(&ns, &ys).ok();
            for row in series {
                row.slope = slope;
            }
        }
    }
    Ok(rows)
}

/// Least-squares slope of `log(y)` against `log(n)`.
pub fn rate_fit(ns: &[f64], ys: &[f64]) -> Result<f64> {
    if ns.len() != ys.len() {
        return Err(Error::DegenerateSeries("length mismatch".into()));
    }
    if ns.len() < 3 {
        return Err(Error::DegenerateSeries(format!(
            "{} points, at least 3 are required",
            ns.len()
        )));
    }
    if ns.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::DegenerateSeries(
            "values must be positive and finite".into(),
        ));
    }
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ls: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = mean(xs.iter().copied());
    let my = mean(ls.iter().copied());
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateSeries("all n values coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ls).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}
