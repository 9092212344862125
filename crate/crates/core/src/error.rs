use thiserror::Error;

/// Rejections raised while validating a run configuration.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("k: active-set size {k} must lie in [1, m] with m = {m}")]
    KOutOfRange { k: usize, m: usize },
    #[error("n: perspective count must be at least 1")]
    NoPerspectives,
    #[error("m: dimension count must be at least 1")]
    NoDimensions,
    #[error("alpha: step size {alpha} outside {bound}")]
    AlphaOutOfRange { alpha: f64, bound: &'static str },
    #[error("competency[{row}][{col}]: entry {value} outside [0, 1]")]
    BadCompetency { row: usize, col: usize, value: f64 },
    #[error("competency: expected a {expected_rows}x{expected_cols} matrix, got {rows}x{cols}")]
    CompetencyShape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("mu: {0}")]
    BadDistribution(String),
    #[error("active set: {0}")]
    BadActiveSet(String),
    #[error("delta0: {0}")]
    BadInitialState(String),
}

/// Failures of the affine-map oracles.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("dense assembly of a {dim}x{dim} operator exceeds the nm <= {limit} guard")]
    TooLarge { dim: usize, limit: usize },
    #[error("I - E[A] is numerically singular")]
    SingularSystem,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentsError {
    #[error("conditional variance undefined for 1 < k < m with m = {m} < 3")]
    DegenerateVariance { m: usize },
    #[error("dimension index {j} out of range for m = {m}")]
    DimensionOutOfRange { j: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("only {got} conditioned samples for dimension {j}; need at least {need}")]
    TooFewSamples { j: usize, got: u64, need: u64 },
    #[error(transparent)]
    Moments(#[from] MomentsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("unknown scenario `{0}` (expected one of: main, generalist, halo)")]
pub struct UnknownScenario(pub String);
