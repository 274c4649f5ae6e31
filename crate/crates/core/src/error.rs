use std::path::PathBuf;

use crate::scene::Pose;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("cloud has zero extent (all points coincide)")]
    ZeroExtent,

    #[error("cloud has no points")]
    EmptyCloud,

    #[error("mask of instance {0} is empty")]
    EmptyMask(usize),

    #[error("pose grid step {0} does not divide 360 degrees")]
    InvalidStep(f64),

    #[error("rendered silhouette is empty")]
    EmptySilhouette,

    #[error("feature extraction failed at pose {pose}: {source}")]
    Extractor {
        pose: Pose,
        #[source]
        source: Box<Error>,
    },

    #[error("incompatible features: {0}")]
    IncompatibleFeature(String),

    #[error("iteration {0} is not covered by any schedule phase")]
    ScheduleExhausted(usize),

    #[error("non-finite collision gradient for pair ({anchor}, {intruder})")]
    NonFiniteGradient { anchor: usize, intruder: usize },

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("validation failed for entry {entry}: {message}")]
    Validation { entry: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Whether this error stems from a numerical failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericOverflow(_)
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteLoss(_)
                | Error::ZeroExtent
        )
    }

    /// Short machine-readable code used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::NumericOverflow(_) => "numeric_overflow",
            Error::ZeroExtent => "zero_extent",
            Error::EmptyCloud => "empty_cloud",
            Error::EmptyMask(_) => "empty_mask",
            Error::InvalidStep(_) => "invalid_step",
            Error::EmptySilhouette => "empty_silhouette",
            Error::Extractor { .. } => "extractor",
            Error::IncompatibleFeature(_) => "incompatible_feature",
            Error::ScheduleExhausted(_) => "schedule_exhausted",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::Validation { .. } => "validation",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}
