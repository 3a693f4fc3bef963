use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(f64),
    #[error("degenerate format: {0}")]
    DegenerateFormat(String),
    #[error("not a normalized value: exponent field {0}")]
    NotNormalized(u32),
    #[error("unbounded format: exact host arithmetic has no representable bounds")]
    UnboundedFormat,
    #[error("invalid format descriptor `{0}`")]
    FormatSyntax(String),

    #[error("no statistics recorded for scale group {0}")]
    NoStatistics(String),
    #[error("no calibration data")]
    NoCalibrationData,
    #[error("malformed calibration file, line {line}: {msg}")]
    CalibrationFile { line: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("accumulator overflow: non-finite sum at ({row}, {col})")]
    AccumulatorOverflow { row: usize, col: usize },
    #[error("operand off grid: {value} is not representable in {format}")]
    OffGrid { value: f64, format: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stale propagation copy")]
    StalePropagation,
    #[error("missing stored forward state: {0}")]
    MissingState(&'static str),
    #[error("non-finite update in {0}")]
    NonFiniteUpdate(String),

    #[error("bad magic number {0:#010x}")]
    BadMagic(u32),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension overflow: {0:?}")]
    DimensionOverflow(Vec<u32>),
    #[error("trailing data: {0} bytes after payload")]
    TrailingData(usize),
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("config error: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than by a defect.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::AccumulatorOverflow { .. }
                | Error::StalePropagation
                | Error::MissingState(_)
                | Error::OffGrid { .. }
        )
    }
}
