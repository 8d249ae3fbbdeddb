use thiserror::Error;

use crate::fit::FitResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("parameter `{name}` = {value} outside its bounds ({lower}, {upper})")]
    OutOfBounds {
        name: String,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("expected count in bin {bin} is {value:e}, below the positivity floor")]
    ModelViolation { bin: usize, value: f64 },

    #[error("fit did not converge after {iterations} iterations (best C = {})", best.c_min)]
    NonConvergence { iterations: usize, best: Box<FitResult> },

    #[error("Fisher information is ill-conditioned (condition estimate {condition:e}); reparameterise the model")]
    IllConditioned { condition: f64 },

    #[error("reference variance {variance:e} is not positive; use a bootstrap method for this dataset")]
    NonPositiveVariance { variance: f64 },

    #[error("{} of {total} bootstrap replicates failed to fit (seeds {failed_seeds:?})", failed_seeds.len())]
    ReplicateFailures { total: usize, failed_seeds: Vec<u64> },

    #[error("rate {0} exceeds the summation range (s > 1e6); use large-rate asymptotics")]
    RateTooLarge(f64),

    #[error("cumulant table unavailable and direct summation disabled")]
    TableUnavailable,

    #[error("corrupt cumulant table: {0}")]
    CorruptTable(String),

    #[error("cumulant table failed validation: {0}")]
    TableValidation(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
