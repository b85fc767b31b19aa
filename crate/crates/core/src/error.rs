use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadDataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("column {0} has zero variance")]
    ZeroVarianceColumn(usize),
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("matrix is not numerically positive definite (pivot {pivot})")]
    FactorizationFailed { pivot: usize },
    #[error("precision matrix has non-positive diagonal at index {0}")]
    NonpositiveDiagonal(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("edge ({i}, {j}) has non-positive weight {w}; density exceeds the positive partial correlations")]
    NonPositiveEdgeWeight { i: usize, j: usize, w: f64 },
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),

    #[error("empty batch")]
    EmptyBatch,
    #[error("memory bank row {0} has zero norm")]
    ZeroNormRow(usize),

    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (epoch {epoch}): ce={ce} mse={mse} ortho={ortho}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        ce: f64,
        mse: f64,
        ortho: f64,
    },
    #[error("correlation undefined: zero variance in {0}")]
    DegenerateCorr(&'static str),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("{path}: parse error at line {line}, column {col}: {msg}")]
    ParseError {
        path: String,
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("{path}: non-finite value at line {line}, column {col}")]
    NonFiniteValue { path: String, line: usize, col: usize },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{path}: corrupt payload: {reason}")]
    CorruptPayload { path: String, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

impl Error {
    /// Stable variant name for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::BadDataLength { .. } => "BadDataLength",
            Error::NonFiniteEntry { .. } => "NonFiniteEntry",
            Error::ZeroVarianceColumn { .. } => "ZeroVarianceColumn",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::FactorizationFailed { .. } => "FactorizationFailed",
            Error::NonpositiveDiagonal { .. } => "NonpositiveDiagonal",
            Error::InvalidArgument { .. } => "InvalidArgument",
            Error::ForeignVar => "ForeignVar",
            Error::NonScalarLoss { .. } => "NonScalarLoss",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::NonPositiveEdgeWeight { .. } => "NonPositiveEdgeWeight",
            Error::UnknownTask { .. } => "UnknownTask",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::EmptyBatch => "EmptyBatch",
            Error::ZeroNormRow { .. } => "ZeroNormRow",
            Error::EmptyDataset => "EmptyDataset",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::DegenerateCorr { .. } => "DegenerateCorr",
            Error::ProtocolViolation { .. } => "ProtocolViolation",
            Error::ParseError { .. } => "ParseError",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::CorruptPayload { .. } => "CorruptPayload",
            Error::InvalidManifest { .. } => "InvalidManifest",
            Error::Io { .. } => "Io",
        }
    }

    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, left, right }
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            msg: err.to_string(),
        }
    }
}
