use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by the command-line front end to pick an
/// exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is within 1e-6 of pi")]
    AngleNearPi { angle: f64 },

    #[error("knot stamps are not strictly increasing ({prev} -> {next})")]
    NonMonotonicStamps { prev: f64, next: f64 },

    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("forward records are stale or missing: {0}")]
    StaleRecords(String),

    #[error("information matrix is singular or not positive definite")]
    SingularInformation,

    #[error("Gauss-Newton cost increased for {0} consecutive iterations")]
    DivergedSolve(usize),

    #[error("Cholesky factorization failed: matrix is not positive semi-definite")]
    CholeskyFailure,

    #[error("window rejected: {0}")]
    WindowRejected(String),

    #[error("no sequence contains a full training window of {0} frames")]
    NoTrainableWindows(usize),

    #[error("trajectory path length {length:.2} m is shorter than the {required} m minimum")]
    TrajectoryTooShort { length: f64, required: f64 },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::MalformedFile { .. }
            | Error::Io { .. }
            | Error::EmptyCloud
            | Error::NonMonotonicStamps { .. }
            | Error::NoTrainableWindows(_)
            | Error::TrajectoryTooShort { .. } => ErrorKind::Data,
            Error::AngleNearPi { .. }
            | Error::NonPositiveDt(_)
            | Error::StaleRecords(_)
            | Error::SingularInformation
            | Error::DivergedSolve(_)
            | Error::CholeskyFailure
            | Error::WindowRejected(_) => ErrorKind::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
