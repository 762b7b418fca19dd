use thiserror::Error;

pub type Result<T> = std::result::Result<T, GmmError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GmmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("degenerate weight: sigma^2 for instrument {index} is {value:e}")]
    DegenerateWeight { index: usize, value: f64 },

    #[error("degenerate instrument variance: sigma^2 for instrument {index} is {value:e}")]
    DegenerateInstrumentVariance { index: usize, value: f64 },

    #[error("coordinate descent did not converge after {sweeps} sweeps (kkt gap {kkt_gap:e})")]
    MaxIterationsExceeded { sweeps: usize, kkt_gap: f64 },

    #[error("linear program is infeasible (phase-one residual {residual:e})")]
    Infeasible { residual: f64 },

    #[error("linear program is unbounded")]
    Unbounded,

    #[error("simplex exceeded {iterations} pivots; cycling suspected")]
    CycleDetected { iterations: usize },

    #[error("non-positive variance {value:e} for coordinate {index}")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("panel needs at least 3 periods, got {periods}")]
    TooFewPeriods { periods: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
