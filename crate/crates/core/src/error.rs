use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("orientation at gimbal lock (pitch = {pitch} rad)")]
    GimbalLock { pitch: f64 },

    #[error("array matrix is rank deficient (σ_min / σ_max = {ratio:e}, {rows} rows, {cols} columns)")]
    RankDeficient { ratio: f64, rows: usize, cols: usize },

    #[error("evaluation point {point:?} within {distance} m of dipole {index} (exclusion radius {radius} m)")]
    ExclusionRadius { index: usize, point: [f64; 3], distance: f64, radius: f64 },

    #[error("innovation covariance is not positive definite")]
    SingularInnovation,

    #[error("constraint vector u is zero")]
    ZeroConstraint,

    #[error("rotation constraint infeasible: |u| = {u_norm}, |w| = {w_norm}")]
    InfeasibleRotation { u_norm: f64, w_norm: f64 },

    #[error("negative variance {value} at step {step}")]
    NegativeVariance { step: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run {index} failed: {source}")]
    Run {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
