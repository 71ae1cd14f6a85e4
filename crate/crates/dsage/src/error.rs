//! Crate-wide error type.

/// Errors surfaced by graph, model, estimator, and I/O operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cycle detected in edge set")]
    CycleDetected,
    #[error("node index {index} out of range for {node_count} nodes")]
    IndexOutOfRange { index: usize, node_count: usize },
    #[error("exact enumeration needs {required} queries, above the cap of {cap}")]
    TooLargeForExact { required: u128, cap: u128 },
    #[error("average degree {avg_degree} invalid for {node_count} nodes (need 0 <= degree <= {max})", max = *node_count - 1)]
    InvalidDegree { avg_degree: f64, node_count: usize },
    #[error("design matrix is singular when scoring node {node}")]
    SingularDesign { node: usize },
    #[error("need at least {required} rows, got {actual}")]
    InsufficientRows { required: usize, actual: usize },
    #[error("covariance block numerically singular (jitter escalated up to {max_jitter:e})")]
    NumericallySingular { max_jitter: f64 },
    #[error("conditioning set is not a proper subset of the variable indices")]
    InvalidConditioningSet,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("graph is missing required variables: {missing}")]
    GraphMismatch { missing: String },
    #[error("node label sets do not match: {detail}")]
    LabelMismatch { detail: String },
    #[error("correlation {r} is too close to +/-1 for the z transform")]
    DegenerateCorrelation { r: f64 },
    #[error("graph has no node with degree >= 1 to use as target")]
    NoEligibleTarget,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the failure is attributable to caller-supplied input or
    /// configuration rather than a condition that arose mid-run; callers
    /// use this to pick exit codes and status codes.
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Parse(_)
                | Error::LabelMismatch { .. }
                | Error::GraphMismatch { .. }
                | Error::InvalidDegree { .. }
                | Error::IndexOutOfRange { .. }
                | Error::InvalidConditioningSet
                | Error::TooLargeForExact { .. }
                | Error::InsufficientRows { .. }
                | Error::CycleDetected
                | Error::NoEligibleTarget
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
