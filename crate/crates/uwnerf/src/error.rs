//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by scene I/O, model construction and training.
#[derive(Debug, Error)]
pub enum UwError {
    /// Underlying file or directory access failed.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A COLMAP text file could not be parsed.
    #[error("{file}:{line}: {msg}")]
    ColmapParse {
        file: String,
        line: usize,
        msg: String,
    },

    /// A camera, image or scene file carried values that are syntactically
    /// fine but geometrically unusable (zero focal length, denormalised
    /// quaternion, ...).
    #[error("invalid camera data: {0}")]
    InvalidCamera(String),

    /// Scene directory is structurally broken (missing files, mismatched
    /// image sizes, unknown split names, ...).
    #[error("invalid scene: {0}")]
    InvalidScene(String),

    /// A configuration value is out of range or inconsistent with others.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Image decode/encode failure.
    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    /// A checkpoint file is malformed, truncated or fails its checksum.
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    /// Shapes or argument values handed to a numerical routine do not fit.
    #[error("shape error: {0}")]
    Shape(String),

    /// A renderer precondition was violated (empty source set, all epipolar
    /// samples invalid, ...).
    #[error("render error: {0}")]
    Render(String),

    /// A numerical quantity left its valid domain (NaN loss term,
    /// divergent optimizer state, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl UwError {
    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        UwError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an image codec error with the path it occurred on.
    pub fn image(path: impl Into<String>, source: image::ImageError) -> Self {
        UwError::Image {
            path: path.into(),
            source,
        }
    }
}
