use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("point lies behind the camera (camera-frame z = {z})")]
    BehindCamera { z: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid gaussian #{index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },

    #[error("view direction is not unit length (norm = {norm})")]
    NonUnitDirection { norm: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("displaced depth d + dd = {depth} is not positive")]
    NegativeDisplacedDepth { depth: f64 },

    #[error("degenerate velocity inverse: displaced depth {depth} <= epsilon")]
    DegenerateInverse { depth: f64 },

    #[error("time interval dt must be non-zero")]
    ZeroTimeStep,

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("scene is empty after pruning ({before} gaussians before, {after} after)")]
    EmptyAfterPrune { before: usize, after: usize },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("sh order mismatch: file has {found}, expected {expected}")]
    ShOrderMismatch { expected: u32, found: u32 },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by bad input data rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::InvalidCamera(_)
                | Error::InvalidGaussian { .. }
                | Error::ShapeMismatch { .. }
                | Error::ShOrderMismatch { .. }
                | Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::Json { .. }
        )
    }
}
