use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad category of a failure, used by front ends to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("image `{id}` is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    ImageSize {
        id: String,
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("dimension mismatch: expected {expected} pixels, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("pgm: {0}")]
    Pgm(String),

    #[error("invalid pixel value {value} in `{id}`")]
    InvalidPixel { id: String, value: f64 },

    #[error("degenerate spectrum: second singular value {sigma2:e} is zero (first {sigma1:e})")]
    DegenerateSpectrum { sigma1: f64, sigma2: f64 },

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate:e})")]
    Diverged { epoch: usize, learning_rate: f64 },

    #[error("training data contains a single class")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },

    #[error("no failure score for assigned id `{0}`")]
    MissingScore(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("serialization: {0}")]
    Serde(String),

    #[error("external scorer: {0}")]
    External(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DegenerateSpectrum { .. } | Error::Diverged { .. } | Error::SingleClass => {
                ErrorClass::Numerical
            }
            Error::InvalidParameter(_) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }

    /// Short snake_case tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::DuplicateId(_) => "duplicate_id",
            Error::ImageSize { .. } => "image_size",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Pgm(_) => "pgm",
            Error::InvalidPixel { .. } => "invalid_pixel",
            Error::DegenerateSpectrum { .. } => "degenerate_spectrum",
            Error::Diverged { .. } => "diverged",
            Error::SingleClass => "single_class",
            Error::Empty(_) => "empty_input",
            Error::TooFewRows { .. } => "too_few_rows",
            Error::MissingScore(_) => "missing_score",
            Error::UnknownId(_) => "unknown_id",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Serde(_) => "serialization",
            Error::External(_) => "external_scorer",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
