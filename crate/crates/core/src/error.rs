use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ShtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ShtError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid sigma {0}: must be > 0")]
    InvalidSigma(f64),

    #[error("degenerate heatmap for landmark {0}: map has no unique maximum")]
    DegenerateHeatmap(usize),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("discriminator score {0} is outside (0, 1)")]
    ScoreOutOfRange(f64),

    #[error("perceptual extractor unavailable: {0}")]
    ExtractorUnavailable(String),

    #[error("degenerate normalizer {0}: must be > 0")]
    DegenerateNormalizer(f64),

    #[error("landmark count mismatch: expected {expected}, got {got}")]
    LandmarkCountMismatch { expected: usize, got: usize },

    #[error("missing normalization anchor: {0}")]
    MissingAnchor(&'static str),

    #[error("error list is empty")]
    EmptyErrorList,

    #[error("invalid error value {0}: must be finite and >= 0")]
    InvalidErrorValue(f64),

    #[error("invalid threshold {0}: must be > 0")]
    InvalidThreshold(f64),

    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    ImageTooSmall { height: usize, width: usize, window: usize },

    #[error("missing annotation for {0}")]
    MissingAnnotation(String),

    #[error("malformed landmark file {path}:{line}: {reason}")]
    MalformedLandmarkFile { path: PathBuf, line: usize, reason: String },

    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),

    #[error("video {0} has no frames")]
    EmptyVideo(String),

    #[error("video {video} has {frames} frame(s); at least 2 are required")]
    TooFewFrames { video: String, frames: usize },

    #[error("more than 20% of landmarks left the crop in {0} attempts")]
    LandmarkOutOfFrame(usize),

    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(String),

    #[error("phase violation: {0}")]
    PhaseViolation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("failed to write checkpoint {path}: {reason}")]
    CheckpointWriteError { path: PathBuf, reason: String },

    #[error("failed to decode image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl ShtError {
    pub fn class(&self) -> ErrorClass {
        use ShtError::*;
        match self {
            InvalidConfig(_) | PhaseViolation(_) | Checkpoint(_) | ExtractorUnavailable(_) => {
                ErrorClass::Config
            }
            MissingAnnotation(_)
            | MissingAnchor(_)
            | MalformedLandmarkFile { .. }
            | InvalidBBox(_)
            | EmptyVideo(_)
            | TooFewFrames { .. }
            | LandmarkOutOfFrame(_)
            | ImageDecode { .. }
            | Io(_)
            | LandmarkCountMismatch { .. }
            | ImageTooSmall { .. } => ErrorClass::Data,
            _ => ErrorClass::Runtime,
        }
    }
}
