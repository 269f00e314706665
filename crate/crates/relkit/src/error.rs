use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor construction, kernels, and the toy harness.
#[derive(Debug)]
pub enum Error {
    /// A tensor constructor received an empty or inconsistent shape.
    InvalidShape { rows: usize, cols: usize },
    /// Data provided to a constructor does not match the declared shape.
    DataLength { expected: usize, got: usize },
    /// Two tensors that must agree in shape do not.
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A non-finite value was found where only finite values are admitted.
    NonFinite { what: &'static str },
    /// A valid query row has no visible key position.
    DegenerateRow { row: usize },
    /// Temperature for the logit KL must be strictly positive.
    NonPositiveTemperature { temperature: f64 },
    /// A probability argument fell outside the open interval (0, 1).
    ProbabilityOutOfRange { name: &'static str, value: f64 },
    /// A loss weight was negative.
    NegativeWeight { name: &'static str, value: f64 },
    /// A tile dimension was zero.
    InvalidTile { tr: usize, tc: usize },
    /// A token id is outside the model vocabulary.
    TokenOutOfRange {
        position: usize,
        token: u32,
        vocab: usize,
    },
    /// A gradient or parameter turned non-finite during training.
    TrainingDiverged { step: usize },
    /// The dense oracle refuses sequence lengths above its cap.
    OracleCapExceeded { n: usize, cap: usize },
    /// A tensor file had a bad magic, tag, or truncated payload.
    BadTensorFile { reason: String },
    /// A stage spec or numeric field failed to parse.
    Parse { field: String },
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidShape { rows, cols } => {
                write!(f, "invalid tensor shape {rows}x{cols}: dimensions must be nonzero")
            }
            Self::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            Self::ShapeMismatch { left, right } => write!(
                f,
                "shape mismatch: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Self::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Self::DegenerateRow { row } => {
                write!(f, "degenerate mask: valid row {row} has no visible key position")
            }
            Self::NonPositiveTemperature { temperature } => {
                write!(f, "temperature must be positive, got {temperature}")
            }
            Self::ProbabilityOutOfRange { name, value } => {
                write!(f, "{name} must lie strictly inside (0, 1), got {value}")
            }
            Self::NegativeWeight { name, value } => {
                write!(f, "{name} must be non-negative, got {value}")
            }
            Self::InvalidTile { tr, tc } => {
                write!(f, "tile dimensions must be nonzero, got {tr}x{tc}")
            }
            Self::TokenOutOfRange {
                position,
                token,
                vocab,
            } => write!(
                f,
                "token {token} at position {position} is outside vocabulary of size {vocab}"
            ),
            Self::TrainingDiverged { step } => {
                write!(f, "training diverged: non-finite gradient at step {step}")
            }
            Self::OracleCapExceeded { n, cap } => {
                write!(f, "n={n} exceeds the dense-oracle cap of {cap}")
            }
            Self::BadTensorFile { reason } => write!(f, "bad tensor file: {reason}"),
            Self::Parse { field } => write!(f, "could not parse {field}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}
