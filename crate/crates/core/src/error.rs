//! Crate-wide error type. Each variant names the failing artifact or field so
//! CLI users can act on the message without a stack trace.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },

    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("bad manifest field `{field}`: {reason}")]
    BadManifestField { field: String, reason: String },

    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },

    #[error("bad omega range: {reason}")]
    BadRange { reason: String },

    #[error("shape mismatch in `{op}`: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("empty dataset: {context}")]
    EmptyDataset { context: String },

    #[error("training loss diverged (non-finite) at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },

    #[error("zero vector: {context}")]
    ZeroVector { context: String },

    #[error("too few vectors for clustering: n={n} < k={k}")]
    TooFewVectors { n: usize, k: usize },

    #[error("model mismatch: {context}")]
    ModelMismatch { context: String },

    #[error("empty window ending at frame {end_index}: no patches extracted")]
    EmptyWindow { end_index: usize },

    #[error("empty dataset group: {which}")]
    EmptyGroup { which: String },

    #[error("plastic-group REI spread is zero; sensitivity undefined")]
    PlasticSpreadZero,

    #[error("training log too short: {len} epochs < plateau window {window}")]
    ShortLog { len: usize, window: usize },

    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("unknown scenario `{name}`")]
    UnknownScenario { name: String },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Process exit classes. Success is 0; everything else groups by failure kind
/// so scripts can branch without parsing messages.
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_MODEL: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class for the CLI.
    pub fn exit_class(&self) -> u8 {
        use Error::*;
        match self {
            BadManifestField { .. }
            | BadRange { .. }
            | ConfigInvalid { .. }
            | UnknownScenario { .. }
            | EmptyGroup { .. }
            | ShortLog { .. }
            | TooFewVectors { .. }
            | PlasticSpreadZero => EXIT_CONFIG,
            MissingFile { .. } | SizeMismatch { .. } | Malformed { .. } | Io { .. } => EXIT_IO,
            ModelMismatch { .. } => EXIT_MODEL,
            DivergedLoss { .. }
            | ZeroVector { .. }
            | ShapeMismatch { .. }
            | DimensionMismatch { .. } => EXIT_NUMERIC,
            EmptyDataset { .. } | EmptyWindow { .. } => EXIT_OTHER,
        }
    }
}
