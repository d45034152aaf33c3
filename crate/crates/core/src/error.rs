use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind or on the camera plane (depth {depth})")]
    NonPositiveDepth { depth: f64 },

    #[error("undistortion did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient views: {valid} valid, at least {required} required")]
    InsufficientViews { valid: usize, required: usize },

    #[error("no valid ensemble member at frame {frame}, coordinate {coordinate}")]
    EmptyEnsemble { frame: usize, coordinate: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("non-finite Jacobian entry: {0}")]
    JacobianFailure(String),

    #[error("only {found} frames pass the low-variance filter, {required} required")]
    InsufficientLowVarianceFrames { found: usize, required: usize },

    #[error("latent posterior is rank deficient ({rows} usable rows for latent dimension {dim})")]
    RankDeficient { rows: usize, dim: usize },

    #[error("{frames} candidate frames for {clusters} clusters")]
    TooFewFrames { frames: usize, clusters: usize },

    #[error("frame {frame} of video {video:?} appears in both ground truth and pseudo-labels")]
    Collision { video: String, frame: i64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse error class, mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidModel(_) => ErrorClass::Config,
            Error::NumericalFailure(_)
            | Error::JacobianFailure(_)
            | Error::NoConvergence { .. }
            | Error::RankDeficient { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
