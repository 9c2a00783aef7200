use std::path::PathBuf;

/// Errors produced by the property-field engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing scene manifest at {0}")]
    MissingManifest(PathBuf),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("frame {frame}: {what} size mismatch: {detail}")]
    DimensionMismatch {
        frame: usize,
        what: &'static str,
        detail: String,
    },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("cannot read depth file {path}: {reason}")]
    Depth { path: PathBuf, reason: String },

    #[error("image error at {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("camera centers are coincident, pose normalization is undefined")]
    DegeneratePoses,

    #[error("point lies behind the camera (depth {0})")]
    BehindCamera(f64),

    #[error("scene has no valid pixels to sample")]
    EmptyScene,

    #[error("no source point is visible in any frame")]
    EmptyFusion,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("parse error in fragment {fragment:?}: {reason}")]
    Parse { fragment: String, reason: String },

    #[error("unparseable response after {attempts} attempts: {last_error}")]
    UnparseableResponse {
        attempts: usize,
        last_error: String,
        raw: String,
    },

    #[error("expected {expected} entries, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("invalid material dictionary: {0}")]
    Dictionary(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    VectorDim { expected: usize, got: usize },

    #[error("zero-length vector")]
    ZeroVector,

    #[error("field has no source points")]
    EmptyField,

    #[error("mass integration: {0}")]
    Mass(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("ply: {0}")]
    Ply(String),

    #[error("missing artifact {0}")]
    MissingArtifact(String),

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
