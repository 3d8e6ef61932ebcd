use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate camera: {0}")]
    DegenerateCamera(&'static str),

    #[error("point is behind the camera (camera-space depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("depth must be strictly positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("malformed PLY header: {0}")]
    PlyHeader(String),

    #[error("unsupported PLY property type `{0}`")]
    PlyPropertyType(String),

    #[error("truncated PLY body: {0}")]
    PlyTruncated(String),

    #[error("malformed PFM file: {0}")]
    Pfm(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("missing prerequisite artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),

    #[error("all warp masks are empty: {0}")]
    EmptyMasks(String),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
