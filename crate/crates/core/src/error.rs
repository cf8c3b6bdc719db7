use thiserror::Error;

/// Errors raised by the market model, the equilibrium solver and the optimizers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid market parameters: {0}")]
    InvalidParams(String),

    #[error("group index {group} out of range for {count} groups")]
    InvalidGroup { group: usize, count: usize },

    #[error("invalid capacity vector: {0}")]
    InvalidCapacity(String),

    #[error("invalid lottery: {0}")]
    InvalidLottery(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular waiting-time system at queue length {0}")]
    Singular(usize),

    #[error("non-positive denominator in capacity bound: {0}")]
    NonPositiveDenominator(String),

    #[error("over-capacity certificate failed for group {group} at queue length {queue_length}: wait {wait} <= {threshold}")]
    CertificateFailed {
        group: usize,
        queue_length: usize,
        wait: f64,
        threshold: f64,
    },

    #[error("quadratic subproblem failed: {0}")]
    Subproblem(String),

    #[error("invalid option: {0}")]
    InvalidOptions(String),
}

pub type Result<T> = std::result::Result<T, Error>;
