//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, fitting, simulation and IO.
#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("rank deficient input: {0}")]
    RankDeficient(String),

    #[error("matrix not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("latent dimension {q} unsupported here (quadrature oracle requires q <= 3)")]
    UnsupportedDim { q: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("schema error at row {row}, column {col}: {msg}")]
    Schema { row: usize, col: usize, msg: String },

    #[error("model artifact format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("model artifact checksum mismatch (file corrupted or edited)")]
    ChecksumMismatch,

    #[error("Poisson rate overflow at subject {subject}, code {code}: rate {rate:.3e} exceeds 1e12")]
    RateOverflow { subject: usize, code: usize, rate: f64 },

    #[error("initialization failed: {0}")]
    InitFailure(String),

    #[error("prediction failed for subject {subject}: {msg}")]
    Prediction { subject: String, msg: String },

    #[error("fit failed for subject {subject}: {msg}")]
    SubjectFit { subject: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, ScoreError>;
