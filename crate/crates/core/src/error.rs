use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value passed to {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("quaternion is not unit norm (norm = {norm})")]
    NotUnitQuaternion { norm: f64 },

    #[error("time {t} s outside the valid range [0, {duration}] s")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("need at least 2 IMU samples, got {0}")]
    TooFewSamples(usize),

    #[error("timestamps not strictly increasing at index {index} ({prev} -> {next})")]
    NonMonotonic { index: usize, prev: f64, next: f64 },

    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),

    #[error("ground-truth gap of {gap:.3} s starting at t = {t:.6} s")]
    GroundTruthGap { t: f64, gap: f64 },

    #[error("stream gap of {gap:.3} s at t = {t:.6} s exceeds keyframe period")]
    StreamGap { t: f64, gap: f64 },

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("no associated poses between estimate and ground truth")]
    EmptyAssociation,

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{}: schema error: {msg}", path.display())]
    Schema { path: PathBuf, msg: String },
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input data).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged(_) | Error::Numerical(_) | Error::Degenerate(_) | Error::NonFinite(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
