use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("input is not a unit vector (|w|^2 = {0})")]
    NotUnit(f64),
    #[error("angular argument out of range: {0}")]
    AngularDomain(String),
    #[error("envelope violated at node {node}: ratio {ratio} exceeds bound {bound}")]
    EnvelopeViolation { node: usize, ratio: f64, bound: f64 },
    #[error("envelope truncation too coarse: exp(-beta*R^2) = {value} > {tol}")]
    TruncationTooCoarse { value: f64, tol: f64 },
    #[error("negative or non-finite density value at node {0}")]
    InvalidDensity(usize),
    #[error("grid or envelope mismatch between operands")]
    GridMismatch,
    #[error("smallness condition fails: ||f0|| = {norm} exceeds threshold {threshold}")]
    SmallnessFailure { norm: f64, threshold: f64 },
    #[error("beginning condition fails: max violation {0}")]
    BeginningCondition(f64),
    #[error("monotonicity violated beyond tolerance at iterate {iterate}: {violation}")]
    MonotonicityViolation { iterate: usize, violation: f64 },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("angular density is not integrable: {0}")]
    NotIntegrable(String),
}

pub type Result<T> = std::result::Result<T, Error>;
