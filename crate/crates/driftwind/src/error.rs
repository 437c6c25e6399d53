//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by grid IO, estimation, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {detail}")]
    MalformedHeader { path: String, detail: String },

    #[error("payload length mismatch in {path}: header promises {expected} values, payload holds {actual}")]
    PayloadMismatch {
        path: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite unmasked value at (t={t}, i={i}, j={j})")]
    NonFinite { t: usize, i: usize, j: usize },

    #[error("invalid grid geometry: {0}")]
    BadGeometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("window out of domain: {0}")]
    OutOfDomain(String),

    #[error("missing data inside window at (t={t}, i={i}, j={j})")]
    MissingData { t: usize, i: usize, j: usize },

    #[error("degenerate variance at pixel (i={i}, j={j}): smoothed sd is zero")]
    DegenerateVariance { i: usize, j: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("covariance matrix not positive definite after jitter")]
    NotPositiveDefinite,

    #[error("non-finite value in finite-difference stencil")]
    NonFiniteDifference,

    #[error("no admissible window centers for this grid/window combination")]
    EmptyScan,

    #[error("no finite-variance estimates in time slice {t}")]
    NoFiniteVariance { t: usize },

    #[error("joint simulation dimension {dim} exceeds the {limit}-point dense guard (pass the override to proceed)")]
    SimulationTooLarge { dim: usize, limit: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error on {path}: {detail}")]
    Csv { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
