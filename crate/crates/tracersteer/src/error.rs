use thiserror::Error;

/// Errors shared across the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive-definite: {0}")]
    NotSpd(String),

    #[error("sample nodes must be strictly increasing in t and cover [0,1]: {0}")]
    NonMonotoneGrid(String),

    #[error("interpolated covariance lost positive definiteness at t = {t}")]
    InterpolantNotSpd { t: f64 },

    #[error("tracer matrix is rank deficient: {0}")]
    RankDeficientTracer(String),

    #[error("inner matrix N B N^T is numerically singular (epsilon too small or N degenerate)")]
    SingularInnerMatrix,

    #[error("flow degenerated during integration at t = {t}: {reason}")]
    FlowDegenerate { t: f64, reason: String },

    #[error("terminal surface is infeasible: Gram residual {residual:.3e} exceeds {tol:.3e}")]
    InfeasibleSurface { residual: f64, tol: f64 },

    #[error("terminal transition is not fully determined (tangent dimension {tangent_dim}); use free-endpoint shooting")]
    NotDetermined { tangent_dim: usize },

    #[error("shooting did not converge: best residual {best_residual:.3e} after {iterations} iterations")]
    NoConvergence {
        best_residual: f64,
        iterations: usize,
    },

    #[error("integration grid too coarse: {steps} steps (minimum 16)")]
    GridTooCoarse { steps: usize },

    #[error("configuration error: {0}")]
    SchemaError(String),

    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    #[error("unknown tracer generator '{0}'")]
    UnknownGenerator(String),

    #[error("malformed solution file: {0}")]
    FileFormat(String),

    #[error("verification failed:\n{}", .0.join("\n"))]
    CheckFailed(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
