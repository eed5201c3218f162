use thiserror::Error;

/// Errors raised by the grid, scheme, diagnostics and control layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("linear solver failed: {reason} (residual {residual:.3e})")]
    LinearSolver { reason: String, residual: f64 },

    #[error("Picard iteration did not converge at step {step} after {iterations} iterations (last residual {:.3e})", history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence {
        step: usize,
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("non-finite value encountered: {0}")]
    NumericFailure(String),

    #[error("bound violated at step {step}: {detail}")]
    BoundViolation { step: usize, detail: String },

    #[error("stability guard: k * max(f) = {product:.4} >= 1 on the control region; use k < {suggested_k:.4e}")]
    Stability { product: f64, suggested_k: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input
    /// or a violated invariant).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::LinearSolver { .. }
                | Error::NonConvergence { .. }
                | Error::NumericFailure(_)
                | Error::Stability { .. }
        )
    }

    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, Error::BoundViolation { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
