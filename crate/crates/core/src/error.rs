use thiserror::Error;

/// Errors raised by certificate evaluation, the QP engine, the filters and
/// the simulator.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("non-finite value in {context} at coordinate {coordinate}")]
    NumericalFailure {
        context: &'static str,
        coordinate: usize,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("safety constraint infeasible at state {state:?}: {detail}")]
    InfeasiblePointwise { state: Vec<f64>, detail: String },

    #[error("CLF decrease condition cannot be met at state {state:?} (L_g V = 0)")]
    NotAClfHere { state: Vec<f64> },

    #[error("poles must be strictly positive, got {0:?}")]
    InvalidPoles(Vec<f64>),

    #[error("initial state lies outside the safe set (h = {h})")]
    OutsideSafeSet { h: f64 },

    #[error("relative degree violated: |L_g L_f^(r-1) h| = {norm:e} at state {state:?}")]
    RelativeDegreeViolation { norm: f64, state: Vec<f64> },

    #[error("backup flow diverged at tau = {tau} (|x| = {norm:e})")]
    DivergedFlow { tau: f64, norm: f64 },

    #[error("state diverged (non-finite or |x| = {norm:e})")]
    DivergedState { norm: f64 },

    #[error("barrier undefined: position within {distance:e} of circle center")]
    SingularBarrierPoint { distance: f64 },

    #[error("invalid quadratic program: {0}")]
    InvalidProblem(String),
}

pub type Result<T> = std::result::Result<T, Error>;
