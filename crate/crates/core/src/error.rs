use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("part distance undefined: no part is visible in both feature sets")]
    DistanceUndefined,

    #[error("non-finite value produced in {layer}")]
    Numeric { layer: &'static str },

    #[error("triplet mining impossible: batch needs at least one positive and one negative")]
    MiningImpossible,

    #[error("no part is both visible and trained; confidence unavailable")]
    ConfidenceUnavailable,

    #[error("no visible part to pool")]
    NothingVisible,

    #[error("keyframe undecidable: context holds no negative sample")]
    KeyframeUndecidable,

    #[error("replay unavailable: memories cannot supply both a positive and a negative")]
    ReplayUnavailable,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed record: {0}")]
    Parse(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Parse(_) | Error::Shape(_) => ErrorCategory::Config,
            Error::Io { .. } => ErrorCategory::Io,
            _ => ErrorCategory::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Runtime,
}
