use std::path::PathBuf;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("times file {path}: {reason}")]
    Times { path: PathBuf, reason: String },

    #[error("calibration file {path}: {reason}")]
    CalibFile { path: PathBuf, reason: String },

    #[error("synth spec {path}: {reason}")]
    SynthSpec { path: PathBuf, reason: String },

    #[error("response model: {0}")]
    Response(String),

    #[error("response not monotone on grid interval [{x0:.6}, {x1:.6}]")]
    NonMonotone { x0: f64, x1: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient correspondences: {0}")]
    InsufficientCorrespondences(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
