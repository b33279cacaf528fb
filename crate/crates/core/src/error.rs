use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("time-switching ratio {0} is outside [0, 1)")]
    InvalidTau(f64),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("Dinkelbach iteration did not converge within {0} iterations")]
    NonConvergence(usize),

    #[error("starting point is not strictly feasible (largest constraint value {0:e})")]
    NotStrictlyFeasible(f64),

    #[error("line search stalled at barrier weight {0:e}")]
    LineSearchStall(f64),

    #[error("action has all-zero beamforming entries")]
    AllZeroBeams,

    #[error("refusing to write an empty results table")]
    EmptyTable,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
