use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("image {actual:?} is smaller than the required {required}px")]
    ImageTooSmall { actual: (usize, usize), required: usize },
    #[error("empty mask: foreground covers {fraction:.4} of the frame (floor {floor})")]
    EmptyMask { fraction: f64, floor: f64 },
    #[error("segmenter unavailable: {0} (supply a precomputed --mask file)")]
    SegmenterUnavailable(String),

    #[error("text too long: {tokens} tokens exceeds context length {limit}")]
    TextTooLong { tokens: usize, limit: usize },
    #[error("empty text prompt")]
    EmptyText,
    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("generator unavailable: {0}")]
    GeneratorUnavailable(String),
    #[error("latent shape mismatch: expected {expected:?}, got {actual:?}")]
    LatentShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("feature level mismatch: {0}")]
    LevelMismatch(String),
    #[error("checkpoint missing for role {0}")]
    CheckpointMissing(String),
    #[error("decoder unavailable: {0}")]
    DecoderUnavailable(String),

    #[error("no background representations supplied")]
    EmptyBgReps,
    #[error("harmonizer unavailable: {0}")]
    HarmonizerUnavailable(String),

    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),
    #[error("full-reference metric requires a reference image")]
    MissingReference,
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("invalid job spec: {0}")]
    Validation(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("digest mismatch for {role}: expected {expected}, got {actual}")]
    DigestMismatch {
        role: String,
        expected: String,
        actual: String,
    },
    #[error("download failed for {url}: {reason}")]
    DownloadFailed { url: String, reason: String },
    #[error("invalid checkpoint {id}: {reason}")]
    InvalidCheckpoint { id: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Error {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_weights_error(&self) -> bool {
        matches!(
            self.root(),
            Error::DigestMismatch { .. }
                | Error::DownloadFailed { .. }
                | Error::InvalidCheckpoint { .. }
                | Error::CheckpointMissing(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
