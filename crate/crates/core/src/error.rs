use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CovshapeError>;

#[derive(Debug, Error)]
pub enum CovshapeError {
    #[error("array geometry mismatch: expected {expected}, found {found}")]
    GeometryMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid array geometry: {0}")]
    InvalidGeometry(String),

    #[error("inconsistent scenario: {0}")]
    ScenarioInconsistency(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("degenerate shaping for UE {ue}: effective covariance has zero trace")]
    DegenerateShaping { ue: usize },

    #[error("rank-deficient matrix: {0}")]
    RankDeficient(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("optimizer failed at iteration {iteration} (UE {ue}): {source}")]
    Optimizer {
        iteration: usize,
        ue: usize,
        #[source]
        source: Box<CovshapeError>,
    },

    #[error("pilot length {tau} too short for {mode} pilots: need at least {required}")]
    PilotTooShort {
        mode: &'static str,
        tau: usize,
        required: usize,
    },

    #[error("exhaustive search over {combinations} combinations exceeds the cap of {cap}")]
    SearchTooLarge { combinations: u128, cap: u128 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("sweep point {var}={value}: {source}")]
    Point {
        var: &'static str,
        value: f64,
        #[source]
        source: Box<CovshapeError>,
    },
}
