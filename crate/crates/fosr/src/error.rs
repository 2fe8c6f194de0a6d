use thiserror::Error;

/// Errors produced by estimation, tuning, and inference routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    #[error("bandwidth too small: {0}")]
    Bandwidth(String),

    #[error("degenerate smoother: {0}")]
    DegenerateSmoother(String),

    #[error("degenerate noise estimate: {0}")]
    DegenerateNoise(String),

    #[error("solver diverged: {0}")]
    Divergence(String),

    #[error("near-degenerate support: condition number {cond:.3e}")]
    DegenerateSupport { cond: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
