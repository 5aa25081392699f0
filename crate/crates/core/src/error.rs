use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask dimensions must be non-zero, got {height}x{width}")]
    InvalidDimensions { height: u32, width: u32 },

    #[error("dimension mismatch: {left:?} vs {right:?} (height, width)")]
    DimensionMismatch { left: (u32, u32), right: (u32, u32) },

    #[error("rle counts sum to {actual}, expected {expected}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("rle run {index} has zero length")]
    MalformedRuns { index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("prediction set for unknown image id `{0}`")]
    UnknownImageId(String),

    #[error("ground-truth instance {instance_id} of image `{image_id}` has an empty mask")]
    EmptyGroundTruth { image_id: String, instance_id: u32 },

    #[error("no ground-truth instances to evaluate")]
    NoGroundTruth,

    #[error("reference source `{0}` not found among prediction sets")]
    MissingReference(String),

    #[error("ensembling needs at least two prediction sets, got {0}")]
    FewerThanTwoSets(usize),

    #[error("degenerate transform: {0}")]
    DegenerateTransform(String),

    #[error("could not place {wanted} cells after {attempts} attempts")]
    PlacementFailure { wanted: usize, attempts: usize },

    #[error("missing mask file {k} for image `{image_id}` (mask indices must be contiguous from 1)")]
    MissingMask { image_id: String, k: u32 },

    #[error("mask file {path} refers to image `{image_id}`, which has no image file")]
    OrphanMask { path: PathBuf, image_id: String },

    #[error("mask file {path} contains unexpected label value {value}")]
    UnexpectedLabelValue { path: PathBuf, value: u8 },

    #[error("mask file {path} has no labelled pixels")]
    EmptyMaskFile { path: PathBuf },

    #[error("mask file {path} is {actual:?} but its image is {expected:?} (height, width)")]
    FileDimensionMismatch {
        path: PathBuf,
        expected: (u32, u32),
        actual: (u32, u32),
    },

    #[error("schema violation in {context}: {message}")]
    SchemaViolation { context: String, message: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// Whether the error stems from caller-supplied input rather than a broken
    /// internal invariant.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::InvariantViolation(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::SchemaViolation {
            context: context.into(),
            message: message.into(),
        }
    }
}
