use std::path::PathBuf;

/// Errors produced by the simulation, attack and detection pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("branch {branch} has non-positive reactance {x}")]
    NonPositiveReactance { branch: usize, x: f64 },

    #[error("unknown branch {0}")]
    UnknownBranch(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("rank-deficient matrix: {0}")]
    RankDeficient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("target unreachable: flow {flow_pu:.6} p.u. already at or beyond limit {limit_pu:.6} p.u.")]
    TargetUnreachable { flow_pu: f64, limit_pu: f64 },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
