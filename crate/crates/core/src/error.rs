use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("Metzler violation at entry ({row}, {col}) = {value:e}{context}")]
    MetzlerViolation {
        row: usize,
        col: usize,
        value: f64,
        context: String,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is reducible: {0}")]
    Reducible(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("iteration limit of {iterations} reached (last residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },

    #[error("Perron pair residual {residual:e} exceeds tolerance {tolerance:e}")]
    PerronResidual { residual: f64, tolerance: f64 },

    #[error("period map failed to contract after {iterations} iterations (last Hilbert gap {gap:e})")]
    ContractionFailure { iterations: usize, gap: f64 },

    #[error("numerical blow-up: {0}")]
    NumericalBlowup(String),
}

impl CoreError {
    /// Errors that signal the model violates a standing hypothesis
    /// (irreducibility, contraction) rather than a numerical failure.
    pub fn is_assumption_violation(&self) -> bool {
        matches!(
            self,
            CoreError::Reducible(_)
                | CoreError::AssumptionViolation(_)
                | CoreError::ContractionFailure { .. }
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::IterationLimit { .. }
                | CoreError::PerronResidual { .. }
                | CoreError::NumericalBlowup(_)
        )
    }
}
