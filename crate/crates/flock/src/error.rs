use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    /// A scalar argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration value or malformed config file.
    #[error("config error: {0}")]
    Config(String),

    /// Config file is missing required keys.
    #[error("config error: missing keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),

    /// Two objects that must share a grid (or shape) do not.
    #[error("shape error: {0}")]
    Shape(String),

    /// A trajectory left the finite range; carries the first bad step.
    #[error("numerical blowup at step {step} (t = {t}): {what}")]
    Blowup { step: usize, t: f64, what: String },

    /// Phase-space grid is smaller than the support envelopes require.
    #[error(
        "grid too small: needs |x| <= {needed_x:.3}, |v| <= {needed_v:.3}, \
         has |x| <= {have_x:.3}, |v| <= {have_v:.3}"
    )]
    GridTooSmall {
        needed_x: f64,
        needed_v: f64,
        have_x: f64,
        have_v: f64,
    },

    /// An empirical measure with no atoms was passed where mass is required.
    #[error("empty measure")]
    EmptyMeasure,

    /// Not enough samples for the requested statistic.
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    /// CLI / experiment dispatch error.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
