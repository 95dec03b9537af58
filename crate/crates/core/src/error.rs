use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the lattice, penalty, measure, stopping, rbsde and oracle
/// modules. Every variant names the module that produced it so that the
/// driver can report where a bad input was caught.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("[{module}] invalid parameter `{field}`: {reason}")]
    Parameter {
        module: &'static str,
        field: &'static str,
        reason: String,
    },

    #[error("[lattice] payoff {value} at node (t={t}, j={j}) exceeds the declared bound {bound}")]
    BoundViolation { t: usize, j: usize, value: f64, bound: f64 },

    #[error("[penalty] assumption {assumption} violated: {detail}")]
    Assumption { assumption: &'static str, detail: String },

    #[error("[measures] stopping rule is not node-measurable: node (t={t}, j={j}) is reached both before and after the rule stops")]
    UnsupportedRule { t: usize, j: usize },

    #[error("[rbsde] terminal value {xi} is below the obstacle {obstacle} at terminal node j={j}")]
    ObstacleViolation { j: usize, xi: f64, obstacle: f64 },

    #[error("[{module}] shape mismatch: {detail}")]
    Shape { module: &'static str, detail: String },

    #[error("[oracle] enumeration budget exceeded: {rules} stopping rules, {policies} policies (cap {cap})")]
    Budget { rules: u128, policies: u128, cap: u128 },

    #[error("[rbsde] optimal tilt clipped at {clipped} of {total} nodes (limit {limit_fraction}); refine the lattice with a smaller dt")]
    LatticeTooCoarse {
        clipped: usize,
        total: usize,
        limit_fraction: f64,
    },
}

impl Error {
    pub(crate) fn param(module: &'static str, field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            module,
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(module: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            module,
            detail: detail.into(),
        }
    }

    /// Module that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Parameter { module, .. } | Error::Shape { module, .. } => module,
            Error::BoundViolation { .. } => "lattice",
            Error::Assumption { .. } => "penalty",
            Error::UnsupportedRule { .. } => "measures",
            Error::ObstacleViolation { .. } | Error::LatticeTooCoarse { .. } => "rbsde",
            Error::Budget { .. } => "oracle",
        }
    }
}
