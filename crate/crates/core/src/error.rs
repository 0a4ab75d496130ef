use thiserror::Error;

/// Errors raised by scene validation, signal synthesis, the solvers and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("source {index} at ({x}, {y}) lies outside the search area")]
    SourceOutsideSearchArea { index: usize, x: f64, y: f64 },

    #[error("tau_max {tau_max:e} s is below the largest in-area propagation delay {required:e} s")]
    TauMaxTooSmall { tau_max: f64, required: f64 },

    #[error("observation window {window:e} s plus tau_max {tau_max:e} s exceeds the waveform period {period:e} s")]
    WrapViolation { window: f64, tau_max: f64, period: f64 },

    #[error("path delay {delay:e} s is outside [0, {tau_max:e}] s")]
    DelayOutOfRange { delay: f64, tau_max: f64 },

    #[error("inconsistent channel: {0}")]
    InconsistentSpec(String),

    #[error("solver did not converge after {iterations} iterations (certified gap {gap:e})")]
    NonConvergence { iterations: usize, gap: f64 },

    #[error("residual bound {epsilon:e} is below the least-squares residual {min_residual:e}")]
    Infeasible { epsilon: f64, min_residual: f64 },

    #[error("empty active set")]
    EmptyActiveSet,

    #[error("no detection above the noise gate")]
    NoDetection,

    #[error("multilateration needs at least 3 arrival times, got {0}")]
    InsufficientSensors(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
