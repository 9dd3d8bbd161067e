//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong in the pipeline.
///
/// Numerical operations fail loudly rather than returning garbage: a metric
/// that loses positive-definiteness, a constraint Gram matrix that
/// degenerates, or a sample point that leaves the declared domain all raise
/// a dedicated variant.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum NhkError {
    /// Kinetic-energy metric failed its SPD factorization at a point.
    #[error("kinetic metric is singular or indefinite at {0}")]
    SingularMetric(String),

    /// The m×m constraint Gram matrix (or the translated-slot constraint
    /// block) is singular, so the Chaplygin split breaks down.
    #[error("constraint Gram matrix is singular at {0}")]
    SingularConstraintGram(String),

    /// The almost-symplectic two-form lost invertibility, so the reduced
    /// vector field is not defined at the point.
    #[error("almost-symplectic form is degenerate at {0}")]
    DegenerateAlmostSymplectic(String),

    /// A multiplier value hit zero on its declared domain.
    #[error("multiplier vanishes at {0}")]
    ZeroMultiplier(String),

    /// Evaluation left the declared domain (singular locus, box violation,
    /// negative radicand, or non-finite intermediate).
    #[error("domain violation: {0}")]
    DomainViolation(String),

    /// Adaptive integration could not satisfy the error tolerance above the
    /// minimum step size.
    #[error("adaptive step rejected below floor: {0}")]
    StepRejected(String),

    /// Hamilton-Jacobi constants do not satisfy the required energy relation.
    #[error("invalid solution constants: {0}")]
    InvalidConstants(String),

    /// Physical parameters are out of range or violate a required relation.
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    /// A form expected to drop to the quotient has a nonzero vertical
    /// contraction.
    #[error("form is not basic: {0}")]
    NotBasic(String),

    /// A covector handed to a level-set operation does not lie on the
    /// requested momentum level.
    #[error("point is not on the requested momentum level: {0}")]
    WrongLevel(String),

    /// The locked inertia tensor failed its SPD factorization.
    #[error("locked inertia tensor is singular at {0}")]
    SingularInertia(String),

    /// Bad run configuration (unknown system, malformed definition, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for NhkError {
    /// Keep the io kind visible so a broken stdout pipe can exit quietly.
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => NhkError::Io(io),
            other => NhkError::Config(format!("csv write failed: {other:?}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, NhkError>;

impl NhkError {
    /// Exit status for the CLI: configuration problems exit 2, everything
    /// else (failed checks, numerical breakdowns) exits 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            NhkError::Config(_)
            | NhkError::InvalidParameters(_)
            | NhkError::InvalidConstants(_)
            | NhkError::Json(_) => 2,
            _ => 1,
        }
    }
}

/// Format a coordinate vector for error messages.
pub(crate) fn fmt_point(q: &[f64]) -> String {
    let body = q
        .iter()
        .map(|x| format!("{x:.6}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("({body})")
}
