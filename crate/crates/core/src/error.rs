use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VprError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VprError {
    #[error("manifest missing: {0}")]
    ManifestMissing(PathBuf),

    #[error("inconsistent manifest: `{id}` {reason}")]
    InconsistentManifest { id: String, reason: String },

    #[error("malformed manifest {path}, line {line}: {reason}")]
    ManifestParse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },

    #[error("invalid synthetic world spec: {0}")]
    InvalidSpec(String),

    #[error("invalid image `{id}`: {reason}")]
    InvalidImage { id: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("validation fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeError { expected: usize, actual: usize },

    #[error("bad file format: {0}")]
    FormatError(String),

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    TruncatedError { expected: u64, actual: u64 },

    #[error("the reference set is empty")]
    EmptyReferences,

    #[error("k = {k} exceeds map size {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("no ground truth for query `{0}`")]
    MissingGroundTruth(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("augmentation spec has no kinds to sample")]
    NothingToSample,

    #[error("augmentation multiplicity must be at least 1, got {0}")]
    InvalidMultiplicity(usize),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NumericalDivergence { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VprError {
    /// Stable error name used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            VprError::ManifestMissing(_) => "ManifestMissing",
            VprError::InconsistentManifest { .. } => "InconsistentManifest",
            VprError::ManifestParse { .. } => "ManifestParse",
            VprError::DecodeError { .. } => "DecodeError",
            VprError::InvalidSpec(_) => "InvalidSpec",
            VprError::InvalidImage { .. } => "InvalidImage",
            VprError::InvalidDataset(_) => "InvalidDataset",
            VprError::InvalidFraction(_) => "InvalidFraction",
            VprError::ShapeError { .. } => "ShapeError",
            VprError::FormatError(_) => "FormatError",
            VprError::TruncatedError { .. } => "TruncatedError",
            VprError::EmptyReferences => "EmptyReferences",
            VprError::KTooLarge { .. } => "KTooLarge",
            VprError::MissingGroundTruth(_) => "MissingGroundTruth",
            VprError::DegenerateSpectrum(_) => "DegenerateSpectrum",
            VprError::NothingToSample => "NothingToSample",
            VprError::InvalidMultiplicity(_) => "InvalidMultiplicity",
            VprError::InvalidConfig(_) => "InvalidConfig",
            VprError::NumericalDivergence { .. } => "NumericalDivergence",
            VprError::Io(_) => "Io",
        }
    }
}
