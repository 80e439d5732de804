use crate::sdp::VarId;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("variable {0:?} is not assigned")]
    UnassignedVariable(VarId),

    #[error("variable {0:?} is not declared in this problem")]
    UndeclaredVariable(VarId),

    #[error("negative entry {value} at index {index} (nonnegative vector required)")]
    NegativeEntry { index: usize, value: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("implicit activation equation did not converge after {iterations} iterations (residual {residual:.3e})")]
    WellPosedness { iterations: usize, residual: f64 },

    #[error("state diverged at step {step} (norm {norm:.3e})")]
    Divergence { step: usize, norm: f64 },

    #[error("degenerate Lyapunov matrix: I - RS is numerically singular")]
    DegenerateX,

    #[error("projection infeasible: no controller of this structure attains the margin (alpha={alpha}, sigma={sigma})")]
    ProjectionInfeasible { alpha: f64, sigma: f64 },

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("solver numerical failure: {0}")]
    NumericalFailure(String),

    #[error("no nominal stability: certification fails even at alpha = 0")]
    NoNominalStability,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
