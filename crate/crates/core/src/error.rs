use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("row {row} of {array} has norm {norm} outside [1-1e-3, 1+1e-3]")]
    NormViolation {
        array: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("label {label} at position {position} is outside [0, {classes})")]
    LabelOutOfRange {
        position: usize,
        label: usize,
        classes: usize,
    },

    #[error("batch size {batch_size} must lie in [1, {n}]")]
    InvalidBatchSize { batch_size: usize, n: usize },

    #[error("class {class} has a near-zero mean prompt vector")]
    ZeroMeanVector { class: usize },

    #[error("sample index {index} is out of range for a bank of {len} slots")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("memory bank slot {0} has never been written")]
    UnfilledSlot(usize),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("running mean entry {index} = {value} is degenerate")]
    DegenerateRunningMean { index: usize, value: f64 },

    #[error("beta must lie in [0, 1], got {0}")]
    BetaOutOfRange(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("adapter output for row {0} collapsed to zero norm")]
    DegenerateOutput(usize),

    #[error("schedule step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("ground-truth labels are required but absent")]
    MissingLabels,

    #[error("could not place {classes} anchors with pairwise cosine <= 0.5 in {dim} dimensions")]
    InfeasibleSeparation { classes: usize, dim: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("failed to parse config: {0}")]
    ConfigParse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MalformedHeader(_)
            | Error::VersionMismatch { .. }
            | Error::DimensionMismatch(_)
            | Error::NormViolation { .. }
            | Error::Io { .. }
            | Error::Json(_) => 3,
            Error::NonFiniteGradient(_)
            | Error::NonFiniteLoss { .. }
            | Error::DegenerateOutput(_)
            | Error::DegenerateRunningMean { .. }
            | Error::ZeroMeanVector { .. }
            | Error::InfeasibleSeparation { .. } => 5,
            Error::ConfigParse(_) => 2,
            _ => 4,
        }
    }
}
