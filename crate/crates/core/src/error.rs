//! Error taxonomy shared by every pipeline stage.
//!
//! Each variant has a stable machine-readable [`Error::name`] (printed by the
//! CLI on stderr) and maps onto one of the documented process exit codes.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed input at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid value {value:?} for {what} in {at}")]
    Value {
        what: String,
        at: String,
        value: String,
    },

    #[error("duplicate identifier {0:?}")]
    DuplicateId(String),

    #[error("gene filtering left no genes")]
    EmptyGeneSet,

    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),

    #[error("sample {0:?} has zero library size")]
    ZeroLibrary(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    Numerics(String),

    #[error("stale or incompatible tape: {0}")]
    Tape(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid label encoding: {0}")]
    Label(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch of size {0} is too small (need at least 2)")]
    Batch(usize),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("cannot stratify: {0}")]
    Stratify(String),

    #[error("coefficient of variation undefined: mean is zero")]
    DegenerateCv,

    #[error("sample ids shared between datasets: {0}")]
    DataLeak(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

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
    /// Stable identifier used on stderr by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "ParseError",
            Error::Value { .. } => "ValueError",
            Error::DuplicateId(_) => "DuplicateIdError",
            Error::EmptyGeneSet => "EmptyGeneSetError",
            Error::MetadataMismatch(_) => "MetadataMismatchError",
            Error::ZeroLibrary(_) => "ZeroLibraryError",
            Error::Shape(_) => "ShapeError",
            Error::Numerics(_) => "NumericsError",
            Error::Tape(_) => "TapeError",
            Error::EmptyBatch => "EmptyBatchError",
            Error::Label(_) => "LabelError",
            Error::Config(_) => "ConfigError",
            Error::Batch(_) => "BatchError",
            Error::Invariant(_) => "InvariantError",
            Error::Stratify(_) => "StratifyError",
            Error::DegenerateCv => "DegenerateCvError",
            Error::DataLeak(_) => "DataLeakError",
            Error::Precondition(_) => "PreconditionError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    /// Process exit code: 2 input error, 3 empty result, 4 numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EmptyGeneSet => 3,
            Error::Numerics(_) => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
