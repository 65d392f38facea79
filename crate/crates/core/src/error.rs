use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("population is empty")]
    EmptyPopulation,

    #[error("invalid user {id}: {reason}")]
    InvalidUser { id: usize, reason: String },

    #[error("duplicate user id {0}")]
    DuplicateId(usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: u64, reason: String },

    #[error(
        "download optimization requires rho = tau >= 2 (got rho = {rho}, tau = {tau}); \
         below 2 the aggregate regret is not convex between kick points"
    )]
    UnsupportedExponent { rho: f64, tau: f64 },

    #[error("binary search did not converge after {iterations} iterations (gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },

    #[error("no feasible throttle rate: {0}")]
    NoFeasibleCandidate(String),

    #[error("no feasible starting point: {0}")]
    InfeasibleStart(String),

    #[error("{users} users exceeds the enumeration cap of {cap}; use best-response dynamics instead")]
    EnumerationCap { users: usize, cap: usize },

    #[error("invalid tier assignment: {0}")]
    InvalidAssignment(String),

    #[error("trace mismatch: {0}")]
    TraceMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
