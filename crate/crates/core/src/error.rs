use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector (norm below {threshold:e}) where a direction is required")]
    ZeroVector { threshold: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty matrix: {rows} rows, {cols} columns")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("degenerate batch: column {column} has standard deviation {std:e}")]
    DegenerateBatch { column: usize, std: f64 },

    #[error("batch statistics need at least 2 rows, got {rows}")]
    BatchTooSmall { rows: usize },

    #[error("duplicate anchor id {0}")]
    DuplicateAnchorId(u64),

    #[error("invalid scaled permutation: {0}")]
    InvalidScaledPermutation(String),

    #[error("sigma(I_n) is not numerically invertible (condition number {condition:e})")]
    SingularSigmaIdentity { condition: f64 },

    #[error("intertwiner membership violated: deviation {deviation:e}")]
    MembershipViolation { deviation: f64 },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("bad architecture: {0}")]
    BadArchitecture(String),

    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),

    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),

    #[error("class {class} has {size} points, at least 2 are required")]
    ClassTooSmall { class: usize, size: usize },

    #[error("degenerate MST edge ({i}, {j}) of length {length:e} in class {class}")]
    DegenerateEdge {
        class: usize,
        i: usize,
        j: usize,
        length: f64,
    },

    #[error("lifespan table is not strictly increasing at breakpoint {0}")]
    NonMonotoneTable(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("cache does not match the network: {0}")]
    CacheMismatch(String),

    #[error("cyclic period must be at least 2, got {0}")]
    BadPeriod(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sub-batch size must be at least 2, got {0}")]
    SubBatchTooSmall(usize),

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("requested {requested} samples but only {available} are available")]
    NotEnoughSamples { requested: usize, available: usize },

    #[error("mode mismatch: encoder is {encoder}, head is {head}")]
    ModeMismatch { encoder: String, head: String },

    #[error("anchor count mismatch: expected {expected}, got {got}")]
    AnchorCountMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error comes from numerics rather than from input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroVector { .. }
                | Error::DegenerateBatch { .. }
                | Error::DegenerateEdge { .. }
                | Error::SingularSigmaIdentity { .. }
                | Error::MembershipViolation { .. }
                | Error::NumericalFailure(_)
                | Error::NonFinite { .. }
        )
    }
}
