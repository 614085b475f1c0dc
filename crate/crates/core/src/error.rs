use thiserror::Error;

/// Errors raised by the samplers, models and oracles.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step index {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid likelihood: {0}")]
    InvalidLikelihood(String),

    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("numerical failure at step {step}, particle {particle}: {detail}")]
    NumericalFailure {
        step: usize,
        particle: usize,
        detail: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate ensemble: all weights are zero")]
    DegenerateEnsemble,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("unknown sampler `{0}`")]
    UnknownSampler(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
