//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input values violate a precondition (non-finite samples, negative
    /// frequency, bad probability, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Audio clip shorter than one analysis window.
    #[error("clip too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    /// Not enough data to fit statistics.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A vector with (near-)zero norm entered a direction-sensitive operation.
    #[error("degenerate vector: norm {norm} below {min}")]
    DegenerateVector { norm: f64, min: f64 },

    /// Tensor or batch shape does not match the operation contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Both modalities disabled in a modality mask.
    #[error("invalid modality mask: at least one modality must be enabled")]
    InvalidMask,

    /// Manifest line failed to parse.
    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },

    /// Manifest parsed but failed validation.
    #[error("manifest validation failed:\n{}", .0.join("\n"))]
    ManifestValidation(Vec<String>),

    /// Audio offsets fall outside the decoded audio.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A pseudo-label provider has no record for the requested frame.
    #[error("label lookup failed for clip '{clip_id}' frame {frame_idx}")]
    Lookup { clip_id: String, frame_idx: usize },

    /// A classification task degenerated (e.g. single-class training set).
    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (mask {mask}): batch [{batch_ids}]")]
    NonFiniteLoss {
        step: usize,
        mask: String,
        batch_ids: String,
    },

    /// Checkpoint or feature file has an unexpected layout or hash.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
