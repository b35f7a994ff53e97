use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z:e})")]
    BehindCamera { z: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid surfel: {0}")]
    InvalidSurfel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image too small for SSIM: {width}x{height} (need at least 11 px per side)")]
    ImageTooSmall { width: usize, height: usize },

    #[error("bubble id sets differ: {0}")]
    IdMismatch(String),

    #[error("bubble {0} has no bound surfels")]
    EmptyBubble(u32),

    #[error("frame correspondence broken: {0}")]
    FrameMismatch(String),

    #[error("non-finite gradient in {what} (surfel {surfel:?})")]
    NonFiniteGradient { what: &'static str, surfel: Option<usize> },

    #[error("non-finite loss term `{term}`")]
    NonFiniteLoss { term: &'static str },

    #[error("no surfels")]
    NoSurfels,

    #[error("frame count mismatch for view {view}: expected {expected}, found {found}")]
    FrameCountMismatch { view: String, expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid scene spec: {0}")]
    SpecInvalid(String),

    #[error("malformed {what} file {path:?}: {reason}")]
    Format { what: &'static str, path: PathBuf, reason: String },

    #[error("i/o error on {path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image error on {path:?}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

impl Error {
    /// Short machine-readable code used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BehindCamera { .. } => "behind_camera",
            Error::InvalidCamera(_) => "invalid_camera",
            Error::InvalidSurfel(_) => "invalid_surfel",
            Error::InvalidConfig(_) => "invalid_config",
            Error::EmptyInput(_) => "empty_input",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::IdMismatch(_) => "id_mismatch",
            Error::EmptyBubble(_) => "empty_bubble",
            Error::FrameMismatch(_) => "frame_mismatch",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NoSurfels => "no_surfels",
            Error::FrameCountMismatch { .. } => "frame_count_mismatch",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::SpecInvalid(_) => "spec_invalid",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: &'static str, path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format { what, path: path.into(), reason: reason.to_string() }
    }
}
