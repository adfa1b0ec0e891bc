//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("singular matrix in {context}")]
    Singular { context: &'static str },

    #[error("rank condition failed: {0}")]
    RankCondition(String),

    #[error("state diverged at t = {time:.6} (norm {norm:.3e})")]
    Diverged { time: f64, norm: f64 },

    #[error("step {step:.6e} does not divide interval {interval:.6e}")]
    StepMismatch { step: f64, interval: f64 },

    #[error("grids misaligned: {0}")]
    GridMismatch(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "relative index undefined: reference state {index} is {value:.3e} at t = {time:.6}"
    )]
    ZeroReference { index: usize, value: f64, time: f64 },

    #[error("query t = {query:.6} outside sample range [{lo:.6}, {hi:.6}]")]
    OutOfRange { query: f64, lo: f64, hi: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
