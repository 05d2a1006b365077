use thiserror::Error;

/// Errors raised by the numerical routines in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("deformation angle must lie in (0, 1), got {0}")]
    InvalidTheta(f64),

    #[error("conformal parameter must have positive imaginary part, got {0}")]
    InvalidTau(f64),

    #[error("mismatched deformation angles: {0} vs {1}")]
    ThetaMismatch(f64, f64),

    #[error("derivation axis must be 1 or 2, got {0}")]
    InvalidAxis(u8),

    #[error("element is not selfadjoint (max |a - a*| coefficient = {0:e})")]
    NotSelfadjoint(f64),

    #[error("exponential did not converge: pad change {metric:e} exceeds tolerance {tol:e}")]
    ExpNotConverged { metric: f64, tol: f64 },

    #[error("Neumann series did not converge after {0} terms")]
    NeumannNotConverged(usize),

    #[error("cached Weyl factor is inconsistent: |k^-2 k^2 - 1| = {0:e}")]
    InconsistentWeylFactor(f64),

    #[error("operator asymmetry {0:e} exceeds tolerance")]
    Asymmetric(f64),

    #[error("operator is not flagged selfadjoint")]
    NotFlaggedSelfadjoint,

    #[error("Gram matrix is not positive definite")]
    GramNotPositive,

    #[error("eigensolver failure: {0}")]
    Eigensolver(String),

    #[error("singular system: distance to spectrum {0:e}")]
    NearSingular(f64),

    #[error("negative-order symbol evaluated at the origin without a regularization policy")]
    OriginSingularity,

    #[error("winding cutoff insufficient: discarded Fourier mass {0:e}")]
    WindingCutoff(f64),

    #[error("unsupported parametrix order {0} (at most 2)")]
    UnsupportedOrder(usize),

    #[error("radial tail bound {0:e} exceeds tolerance")]
    TailBound(f64),

    #[error("no admissible t-window: {0}")]
    NoAdmissibleWindow(String),

    #[error("lambda {lambda} beyond validity ceiling {ceiling}")]
    BeyondCeiling { lambda: f64, ceiling: f64 },

    #[error("empty fit window")]
    EmptyWindow,

    #[error("insufficient data: need at least {need}, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
