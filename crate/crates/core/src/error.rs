use thiserror::Error;

/// Errors raised by model construction, solvers and checks.
///
/// Every variant maps to a stable machine-readable reason string via
/// [`Error::reason`], which the command-line driver reports verbatim.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("detailed balance violated: relative violation {violation:.3e}")]
    DetailedBalanceViolation { violation: f64 },

    #[error("jump kernel is not irreducible")]
    NotIrreducible,

    #[error("time {t} is not a grid node")]
    NotOnGrid { t: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("internal inconsistency: {0}")]
    Inconsistency(String),

    #[error("{flagged} grid points have non-positive g")]
    PositivityViolation { flagged: usize },

    #[error("g vanishes at t={t}, state {state}")]
    DivisionGuard { t: f64, state: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("step {0:e} is below the conditioning guard")]
    StepTooSmall(f64),

    #[error("implicit step matrix lost positive definiteness at row {row}")]
    FactorizationBreakdown { row: usize },

    #[error("path left the padded domain at t={t}, x={x}")]
    LeftDomain { t: f64, x: f64 },

    #[error("thinning bound could not be established within {0} subdivisions")]
    SubdivisionDepthExceeded(usize),

    #[error("no convergence after {iterations} iterations (last error {last_error:.3e})")]
    NotConverged { iterations: usize, last_error: f64 },
}

impl Error {
    pub fn reason(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidInput(_) => "invalid_input",
            Error::DetailedBalanceViolation { .. } => "detailed_balance_violation",
            Error::NotIrreducible => "not_irreducible",
            Error::NotOnGrid { .. } => "not_on_grid",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Inconsistency(_) => "internal_inconsistency",
            Error::PositivityViolation { .. } => "positivity_flag",
            Error::DivisionGuard { .. } => "division_guard",
            Error::Domain(_) => "domain_error",
            Error::StepTooSmall(_) => "step_too_small",
            Error::FactorizationBreakdown { .. } => "factorization_breakdown",
            Error::LeftDomain { .. } => "left_domain",
            Error::SubdivisionDepthExceeded(_) => "subdivision_depth_exceeded",
            Error::NotConverged { .. } => "not_converged",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
