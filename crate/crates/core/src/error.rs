use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulate/design/estimate pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("parameter vector has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },

    #[error("parameter mu_{index} = {value} outside [{lower}, {upper}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("initial voltage {v0} V is not reachable by the open-circuit potentials")]
    VoltageUnreachable { v0: f64 },

    #[error("open-circuit potential is not monotone: {crossings} sign changes for v0 = {v0} V")]
    NonMonotoneOcv { v0: f64, crossings: usize },

    #[error("exchange current overflow in {electrode} at surface concentration {xi}")]
    ExchangeOverflow { electrode: &'static str, xi: f64 },

    #[error("exchange current vanished in {electrode} at surface concentration {xi}")]
    ExchangeUnderflow { electrode: &'static str, xi: f64 },

    #[error("concentration saturation: {events} clamp events exceed budget {budget}")]
    Saturation { events: usize, budget: usize },

    #[error("current profile breakpoint {time} s is not a multiple of the time step {step} s")]
    StepMisaligned { time: f64, step: f64 },

    #[error("invalid current profile: {0}")]
    Profile(String),

    #[error("simulation for perturbed parameter {index} failed: {source}")]
    Perturbation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("input horizons differ: {left} s vs {right} s")]
    HorizonMismatch { left: f64, right: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's JSON error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite { .. } => "non_finite",
            Error::Dimension { .. } => "dimension",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::VoltageUnreachable { .. } => "voltage_unreachable",
            Error::NonMonotoneOcv { .. } => "non_monotone_ocv",
            Error::ExchangeOverflow { .. } => "exchange_overflow",
            Error::ExchangeUnderflow { .. } => "exchange_underflow",
            Error::Saturation { .. } => "concentration_saturation",
            Error::StepMisaligned { .. } => "step_misaligned",
            Error::Profile(_) => "profile",
            Error::Perturbation { .. } => "perturbation",
            Error::HorizonMismatch { .. } => "horizon_mismatch",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
