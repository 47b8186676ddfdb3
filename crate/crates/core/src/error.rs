use thiserror::Error;

/// Errors raised by the simulation engines and their supporting modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("non-finite coefficient {matrix}[{row},{col}] at t = {t}")]
    Evaluation {
        matrix: &'static str,
        row: usize,
        col: usize,
        t: f64,
    },

    #[error("time {t} outside horizon [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("traces are not aligned: {0}")]
    Alignment(String),

    #[error("state diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("step size underflow at t = {t} (h = {h:e})")]
    Stiffness { t: f64, h: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input signal: {0}")]
    InvalidSignal(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
