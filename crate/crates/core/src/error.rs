use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by dawn-core.
#[derive(Debug, Error)]
pub enum DawnError {
    #[error("point set is empty")]
    EmptyPointSet,

    #[error("raster is {width}x{height}, need at least {min}x{min}")]
    RasterTooSmall { width: u32, height: u32, min: u32 },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (u32, u32), right: (u32, u32) },

    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),

    #[error("no pixel carries a positive training weight")]
    EmptyOmega,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("point ({x}, {y}) lies outside {width}x{height}")]
    PointOutOfBounds { x: i64, y: i64, width: u32, height: u32 },

    #[error("duplicate point ({0}, {1})")]
    DuplicatePoint(u32, u32),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{what} has value {value} outside [{lo}, {hi}]")]
    RangeViolation { what: String, value: f64, lo: f64, hi: f64 },

    #[error("{0} contains a non-finite value")]
    NonFinite(String),

    #[error("could not place {requested} nuclei (placed {placed}) within the retry budget")]
    PlacementInfeasible { requested: usize, placed: usize },

    #[error("predictor failed in round {round} ({status}): {diagnostics}")]
    PredictorFailed { round: u32, status: String, diagnostics: String },

    #[error("bundle validation failed in round {round} for image {image}: {source}")]
    ValidationFailed {
        round: u32,
        image: String,
        #[source]
        source: Box<DawnError>,
    },

    #[error("image ids do not line up: {0}")]
    IdMismatch(String),

    #[error("unknown dataset preset {0:?}")]
    UnknownDataset(String),

    #[error("malformed {kind} file {}: {message}", path.display())]
    Format { kind: &'static str, path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = DawnError> = std::result::Result<T, E>;

impl DawnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DawnError::Io { path: path.into(), source }
    }

    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, message: impl ToString) -> Self {
        DawnError::Format { kind, path: path.into(), message: message.to_string() }
    }
}
