//! Command-line front end: `simulate`, `estimate-p`, `estimate-f` and `mc-study`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::estimate_f::{
    estimate_f_adaptive, estimate_f_known_p, mixture_density, posterior_nonresponse,
    DensityEstimate, FConfig, DEFAULT_TRUNC_EXPONENT, DEFAULT_X_POINTS,
};
use crate::estimate_p::{
    default_beta, default_eps, estimate_p_adaptive, PConfig, PEstimate, DEFAULT_S_MAX, MIN_SAMPLE,
};
use crate::kernels::{FlatTopKernel, DEFAULT_KERNEL_A, DEFAULT_KERNEL_M};
use crate::simulate::{mc_study, sample_model, McRow, McStudy, ModelSpec};
use crate::spectral::{default_bandwidth, NoiseModel, DEFAULT_CF_FLOOR, DEFAULT_QUAD_POINTS};

pub const SCHEMA_VERSION: &str = "1";
pub const THREADS_ENV: &str = "ATOMDECONV_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "atomdeconv",
    version,
    about = "Atom weight and response density estimation for Z = U + A*X"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a sample from one of the reference designs.
    Simulate(SimulateArgs),
    /// Estimate the non-response weight p = P[A = 0].
    EstimateP(EstimatePArgs),
    /// Estimate the response density f.
    EstimateF(EstimateFArgs),
    /// Run a Monte-Carlo study described by a JSON config.
    McStudy(McStudyArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// 1: U ~ Gamma(2,1), X ~ Gamma(gamma,1). 2: U ~ Gamma(gamma,1), X ~ Gamma(2,1).
    #[arg(long)]
    pub dataset: u8,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Sample CSV with a `z` column.
    #[arg(long)]
    pub data: PathBuf,
    /// `gamma:k,theta` or `calib:file.csv` (column `u`).
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub kde_bandwidth: Option<f64>,
    /// Decay exponent of the noise characteristic function (required with `calib:`).
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub s_max: Option<f64>,
    #[arg(long)]
    pub kernel_a: Option<f64>,
    #[arg(long)]
    pub kernel_m: Option<f64>,
    #[arg(long)]
    pub quad_points: Option<usize>,
    #[arg(long)]
    pub cf_floor: Option<f64>,
    /// Replace every value by its base-10 logarithm, dropping nonpositive ones.
    #[arg(long)]
    pub log10_transform: bool,
    /// JSON file with defaults for any of these flags; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Result document path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimatePArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also write `n,p_hat` for growing prefixes of the sample.
    #[arg(long)]
    pub subsample_curve: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub subsample_steps: usize,
}

#[derive(Debug, Args)]
pub struct EstimateFArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Exponent in the truncation level (log n)^-a.
    #[arg(long)]
    pub a: Option<f64>,
    /// Use this atom weight instead of estimating it.
    #[arg(long)]
    pub known_p: Option<f64>,
    /// Destination of the `x,f_hat` table.
    #[arg(long)]
    pub density: PathBuf,
    #[arg(long)]
    pub x_points: Option<usize>,
    /// Also write `z,posterior` (non-response probability given Z).
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    /// Also write `z,density_of_Z_hat`, the fitted density of Z.
    #[arg(long)]
    pub fit_check: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct McStudyArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Results CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings that may come from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub noise: Option<String>,
    pub kde_bandwidth: Option<f64>,
    pub nu: Option<f64>,
    pub beta: Option<f64>,
    pub eps: Option<f64>,
    pub s_max: Option<f64>,
    pub kernel_a: Option<f64>,
    pub kernel_m: Option<f64>,
    pub quad_points: Option<usize>,
    pub cf_floor: Option<f64>,
    pub log10_transform: Option<bool>,
    pub a: Option<f64>,
    pub known_p: Option<f64>,
    pub x_points: Option<usize>,
    pub x_grid: Option<Vec<f64>>,
}

/// Every setting actually used, defaults included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub noise: String,
    pub nu: f64,
    pub kde_bandwidth: Option<f64>,
    pub cf_floor: f64,
    pub beta: f64,
    pub eps: f64,
    pub s_max: f64,
    pub kernel_a: f64,
    pub kernel_m: f64,
    pub quad_points: usize,
    pub log10_transform: bool,
    pub n: usize,
    pub a: Option<f64>,
    pub known_p: Option<f64>,
    pub x_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    P(PEstimate),
    F(DensityEstimate),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: String,
    pub command: String,
    /// SHA-256 over the command, the resolved parameters and every input file.
    pub inputs_digest: String,
    pub parameters: Parameters,
    pub estimate: Payload,
    pub timing_ms: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input data; exit status 2.
    Usage(String),
    /// Failure while running; exit status 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) | Error::IncompatibleGrids(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Sizes the global worker pool from `ATOMDECONV_THREADS` (unset or 0: automatic).
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| {
        usage(format!(
            "{THREADS_ENV} must be a nonnegative integer, got {raw:?}"
        ))
    })?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::EstimateP(args) => cmd_estimate_p(&args),
        Command::EstimateF(args) => cmd_estimate_f(&args),
        Command::McStudy(args) => cmd_mc_study(&args),
    }
}

fn output(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| io_error(p, e)),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Runtime(format!("stdout: {e}"))),
    }
}

fn csv_bytes<R: AsRef<[String]>>(
    header: &[&str],
    rows: impl IntoIterator<Item = R>,
) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let runtime = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(header).map_err(runtime)?;
    for row in rows {
        w.write_record(row.as_ref()).map_err(runtime)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    if !(args.gamma.is_finite() && args.gamma > 0.0) {
        return Err(usage(format!(
            "--gamma must be positive, got {}",
            args.gamma
        )));
    }
    if !matches!(args.dataset, 1 | 2) {
        return Err(usage(format!(
            "--dataset must be 1 or 2, got {}",
            args.dataset
        )));
    }
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let spec = ModelSpec::dataset(args.dataset, args.gamma, args.n, args.seed)?;
    let z = sample_model(&spec)?;
    eprintln!(
        "{}",
        serde_json::to_string(&spec).map_err(|e| CliError::Runtime(e.to_string()))?
    );
    let bytes = csv_bytes(&["z"], z.iter().map(|v| [v.to_string()]))?;
    output(args.out.as_deref(), &bytes)
}

/// Reads one numeric column from a headered CSV.
pub fn read_column(path: &Path, column: &str) -> CliResult<(Vec<f64>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?
        .clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| usage(format!("{}: no `{column}` column", path.display())))?;
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let field = record.get(idx).unwrap_or("");
        let v: f64 = field.parse().map_err(|_| {
            usage(format!(
                "{}: row {}: `{field}` is not a number",
                path.display(),
                line + 1
            ))
        })?;
        if !v.is_finite() {
            return Err(usage(format!(
                "{}: row {}: non-finite value",
                path.display(),
                line + 1
            )));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(usage(format!("{}: no observations", path.display())));
    }
    Ok((values, bytes))
}

fn log10_values(values: Vec<f64>, what: &str, warnings: &mut Vec<String>) -> Vec<f64> {
    let before = values.len();
    let kept: Vec<f64> = values
        .into_iter()
        .filter(|v| *v > 0.0)
        .map(f64::log10)
        .collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        warnings.push(format!(
            "log10 transform dropped {dropped} nonpositive {what} value(s)"
        ));
    }
    kept
}

/// Inputs and settings shared by both estimation commands.
struct Prepared {
    samples: Vec<f64>,
    noise: NoiseModel,
    p_config: PConfig,
    params: Parameters,
    digest: Sha256,
    config: RunConfig,
    warnings: Vec<String>,
}

fn read_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn prepare(command: &str, args: &CommonArgs) -> CliResult<Prepared> {
    let config = read_config(args.config.as_deref())?;
    let log10 = args.log10_transform || config.log10_transform.unwrap_or(false);
    let noise_spec = args
        .noise
        .clone()
        .or_else(|| config.noise.clone())
        .ok_or_else(|| usage("--noise is required (gamma:k,theta or calib:file.csv)"))?;
    let mut warnings = Vec::new();
    let mut digest = Sha256::new();
    digest.update(command.as_bytes());

    let (data, data_bytes) = read_column(&args.data, "z")?;
    digest.update((data_bytes.len() as u64).to_le_bytes());
    digest.update(&data_bytes);
    let samples = if log10 {
        log10_values(data, "sample", &mut warnings)
    } else {
        data
    };
    if samples.len() < MIN_SAMPLE {
        return Err(usage(format!(
            "{} usable observations, at least {MIN_SAMPLE} are required",
            samples.len()
        )));
    }

    let bandwidth_flag = args.kde_bandwidth.or(config.kde_bandwidth);
    let nu_flag = args.nu.or(config.nu);
    let (noise, bandwidth) = if let Some(rest) = noise_spec.strip_prefix("gamma:") {
        let parts: Vec<&str> = rest.split(',').collect();
        let parsed: Option<Vec<f64>> = parts.iter().map(|s| s.trim().parse().ok()).collect();
        let (k, theta) = match parsed.as_deref() {
            Some([k, theta]) => (*k, *theta),
            _ => {
                return Err(usage(format!(
                    "--noise: expected gamma:k,theta, got {noise_spec:?}"
                )))
            }
        };
        if nu_flag.is_some_and(|nu| nu != k) {
            warnings.push(format!(
                "--nu ignored: Gamma noise has decay exponent k = {k}"
            ));
        }
        (
            NoiseModel::gamma(k, theta).map_err(|e| usage(format!("--noise: {e}")))?,
            None,
        )
    } else if let Some(file) = noise_spec.strip_prefix("calib:") {
        let path = PathBuf::from(file);
        let (calib, calib_bytes) = read_column(&path, "u")?;
        digest.update((calib_bytes.len() as u64).to_le_bytes());
        digest.update(&calib_bytes);
        let calib = if log10 {
            log10_values(calib, "calibration", &mut warnings)
        } else {
            calib
        };
        let nu = nu_flag.ok_or_else(|| usage("--nu is required with calib: noise"))?;
        let bandwidth = match bandwidth_flag {
            Some(b) => b,
            None => default_bandwidth(&calib)?,
        };
        (
            NoiseModel::kde(calib, Some(bandwidth), nu)?,
            Some(bandwidth),
        )
    } else {
        return Err(usage(format!(
            "--noise must start with gamma: or calib:, got {noise_spec:?}"
        )));
    };
    let cf_floor = args
        .cf_floor
        .or(config.cf_floor)
        .unwrap_or(DEFAULT_CF_FLOOR);
    let noise = noise
        .with_floor(cf_floor)
        .map_err(|e| usage(format!("--cf-floor: {e}")))?;

    let s_max = args.s_max.or(config.s_max).unwrap_or(DEFAULT_S_MAX);
    let beta = args
        .beta
        .or(config.beta)
        .unwrap_or_else(|| default_beta(s_max, noise.nu));
    let eps = args
        .eps
        .or(config.eps)
        .unwrap_or_else(|| default_eps(beta, s_max, noise.nu));
    let kernel_a = args
        .kernel_a
        .or(config.kernel_a)
        .unwrap_or(DEFAULT_KERNEL_A);
    let kernel_m = args
        .kernel_m
        .or(config.kernel_m)
        .unwrap_or(DEFAULT_KERNEL_M);
    let quad_points = args
        .quad_points
        .or(config.quad_points)
        .unwrap_or(DEFAULT_QUAD_POINTS);
    if quad_points < 3 || quad_points.is_multiple_of(2) {
        return Err(usage(format!(
            "--quad-points must be odd and at least 3, got {quad_points}"
        )));
    }
    let kernel = FlatTopKernel::new(kernel_a, kernel_m)
        .map_err(|e| usage(format!("--kernel-a/--kernel-m: {e}")))?;
    let p_config = PConfig::new(s_max, eps, beta)?
        .with_kernel(kernel)
        .with_quad_points(quad_points);

    let params = Parameters {
        noise: noise_spec,
        nu: noise.nu,
        kde_bandwidth: bandwidth,
        cf_floor,
        beta,
        eps,
        s_max,
        kernel_a,
        kernel_m,
        quad_points,
        log10_transform: log10,
        n: samples.len(),
        a: None,
        known_p: None,
        x_points: None,
    };
    Ok(Prepared {
        samples,
        noise,
        p_config,
        params,
        digest,
        config,
        warnings,
    })
}

fn finish(
    command: &str,
    mut digest: Sha256,
    params: Parameters,
    estimate: Payload,
    started: Instant,
    warnings: Vec<String>,
) -> CliResult<ResultDocument> {
    let encoded = serde_json::to_vec(&params).map_err(|e| CliError::Runtime(e.to_string()))?;
    digest.update(&encoded);
    Ok(ResultDocument {
        schema_version: SCHEMA_VERSION.into(),
        command: command.into(),
        inputs_digest: hex::encode(digest.finalize()),
        parameters: params,
        estimate,
        timing_ms: started.elapsed().as_millis() as u64,
        warnings,
    })
}

fn write_document(doc: &ResultDocument, out: Option<&Path>) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(doc).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    output(out, text.as_bytes())
}

pub fn cmd_estimate_p(args: &EstimatePArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut prep = prepare("estimate-p", &args.common)?;
    let est = estimate_p_adaptive(&prep.samples, &prep.noise, &prep.p_config)?;
    if est.value == 0.0 || est.value == 1.0 {
        prep.warnings
            .push(format!("estimate clamped to {}", est.value));
    }
    if let Some(path) = &args.subsample_curve {
        if args.subsample_steps == 0 {
            return Err(usage("--subsample-steps must be at least 1"));
        }
        let n = prep.samples.len();
        let mut sizes: Vec<usize> = (1..=args.subsample_steps)
            .map(|k| (n * k).div_ceil(args.subsample_steps))
            .filter(|&m| m >= MIN_SAMPLE)
            .collect();
        sizes.dedup();
        let mut rows = Vec::with_capacity(sizes.len());
        for m in sizes {
            let p = estimate_p_adaptive(&prep.samples[..m], &prep.noise, &prep.p_config)?;
            rows.push([m.to_string(), p.value.to_string()]);
        }
        output(Some(path), &csv_bytes(&["n", "p_hat"], rows)?)?;
    }
    let doc = finish(
        "estimate-p",
        prep.digest,
        prep.params,
        Payload::P(est),
        started,
        prep.warnings,
    )?;
    write_document(&doc, args.common.out.as_deref())
}

fn format_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn cmd_estimate_f(args: &EstimateFArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut prep = prepare("estimate-f", &args.common)?;
    let a = args.a.or(prep.config.a).unwrap_or(DEFAULT_TRUNC_EXPONENT);
    let known_p = args.known_p.or(prep.config.known_p);
    let x_points = args
        .x_points
        .or(prep.config.x_points)
        .unwrap_or(DEFAULT_X_POINTS);
    if !(a.is_finite() && a > 0.0) {
        return Err(usage(format!("--a must be positive, got {a}")));
    }
    if let Some(p) = known_p {
        if !(0.0..1.0).contains(&p) {
            return Err(usage(format!("--known-p must lie in [0, 1), got {p}")));
        }
    }
    let f_config = FConfig {
        p: prep.p_config,
        trunc_exponent: a,
        x_grid: prep.config.x_grid.clone(),
        x_points,
    };
    let est = match known_p {
        Some(p) => estimate_f_known_p(&prep.samples, &prep.noise, p, &f_config)?,
        None => estimate_f_adaptive(&prep.samples, &prep.noise, &f_config)?,
    };
    if est.tau.is_some_and(|tau| est.p_used >= 1.0 - tau) {
        prep.warnings
            .push("atom weight hit the truncation level 1 - tau".into());
    }
    if est.f_values.iter().any(|v| *v < 0.0) {
        prep.warnings
            .push("density estimate takes negative values".into());
    }

    let rows = est
        .x_grid
        .iter()
        .zip(&est.f_values)
        .map(|(x, f)| [x.to_string(), f.to_string()]);
    output(Some(&args.density), &csv_bytes(&["x", "f_hat"], rows)?)?;
    if let Some(path) = &args.posterior {
        let post = posterior_nonresponse(&est.x_grid, est.p_used, &prep.noise, &est)?;
        let undefined = post.iter().filter(|v| v.is_none()).count();
        if undefined > 0 {
            prep.warnings.push(format!(
                "posterior undefined at {undefined} point(s), written as NA"
            ));
        }
        let rows = est
            .x_grid
            .iter()
            .zip(post)
            .map(|(z, v)| [z.to_string(), format_optional(v)]);
        output(Some(path), &csv_bytes(&["z", "posterior"], rows)?)?;
    }
    if let Some(path) = &args.fit_check {
        let fit = mixture_density(&est.x_grid, est.p_used, &prep.noise, &est)?;
        let rows = est
            .x_grid
            .iter()
            .zip(fit)
            .map(|(z, v)| [z.to_string(), v.to_string()]);
        output(Some(path), &csv_bytes(&["z", "density_of_Z_hat"], rows)?)?;
    }

    let mut params = prep.params;
    params.a = Some(a);
    params.known_p = known_p;
    params.x_points = Some(est.x_grid.len());
    let mut digest = prep.digest;
    if let Some(grid) = &prep.config.x_grid {
        for x in grid {
            digest.update(x.to_le_bytes());
        }
    }
    let doc = finish(
        "estimate-f",
        digest,
        params,
        Payload::F(est),
        started,
        prep.warnings,
    )?;
    write_document(&doc, args.common.out.as_deref())
}

pub fn mc_rows_csv(rows: &[McRow]) -> CliResult<Vec<u8>> {
    let header = [
        "dataset",
        "gamma",
        "n",
        "replications",
        "mse_p",
        "mean_l2_f",
        "slope",
    ];
    let records = rows.iter().map(|r| {
        [
            r.dataset.to_string(),
            r.gamma.to_string(),
            r.n.to_string(),
            r.replications.to_string(),
            r.mse_p.map_or_else(String::new, |v| v.to_string()),
            r.mean_l2_f.map_or_else(String::new, |v| v.to_string()),
            r.slope.map_or_else(String::new, |v| v.to_string()),
        ]
    });
    csv_bytes(&header, records)
}

pub fn cmd_mc_study(args: &McStudyArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_error(&args.config, e))?;
    let study: McStudy = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    study.validate()?;
    let rows = mc_study(&study).map_err(|e| CliError::Runtime(e.to_string()))?;
    output(args.out.as_deref(), &mc_rows_csv(&rows)?)
}
