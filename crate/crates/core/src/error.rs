use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("no ground plane this frame: {0}")]
    NoGroundPlane(String),

    #[error("degenerate horizon: plane has a = b = 0")]
    DegenerateHorizon,

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("feature set mismatch: {0:?} vs {1:?}")]
    FeatureSetMismatch(crate::features::FeatureSet, crate::features::FeatureSet),

    #[error("empty confusion counts")]
    EmptyCounts,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error summaries.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NoGroundPlane(_) => "no_ground_plane",
            Error::DegenerateHorizon => "degenerate_horizon",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::FeatureSetMismatch(..) => "feature_set_mismatch",
            Error::EmptyCounts => "empty_counts",
            Error::Dataset(_) => "dataset",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Parse { .. } => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
