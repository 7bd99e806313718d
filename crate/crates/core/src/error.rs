use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample")]
    EmptySample,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("sample too small: {0} observations, at least 8 are required")]
    SampleTooSmall(usize),

    #[error("degenerate calibration: sample standard deviation is zero")]
    DegenerateCalibration,

    #[error("degenerate weight: p = {0} leaves no response mass")]
    DegenerateWeight(f64),

    #[error("incompatible grids: {0}")]
    IncompatibleGrids(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Checks that `value` is finite and strictly positive.
pub(crate) fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(Error::invalid(
            name,
            format!("must be positive and finite, got {value}"),
        ))
    }
}
