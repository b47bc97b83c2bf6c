use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument was outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation overflowed or left the representable range.
    #[error("range error: {0}")]
    Range(String),

    /// A numerical procedure failed (singular matrix, no convergence).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The beta adaptive-sigma linear solve hit a degenerate coefficient;
    /// callers fall back to the standard-deviation sigma for this sample.
    #[error("degenerate linear solve for adaptive sigma derivatives")]
    DegenerateSolve,

    /// A sampler kept hitting the support boundary past the retry budget.
    #[error("support-boundary resample limit ({retries} retries) exhausted")]
    ResampleLimit { retries: u32 },

    /// A gradient or parameter stopped being finite mid-run.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Incompatible configuration (family vs. transform vs. layout).
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
