use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} at ({x}, {y}) lies outside the {width}x{height} grid")]
    OutOfBounds {
        what: &'static str,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("I/O error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed TOML in {path}: {reason}")]
    Toml { path: PathBuf, reason: String },

    #[error("missing annotation file {0}")]
    MissingAnnotation(PathBuf),

    #[error("corrupt sequence: {path}: {reason}")]
    CorruptSequence { path: PathBuf, reason: String },

    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },

    #[error("frame shape mismatch in {path}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("detection failed on frame {frame}: degenerate heatmap")]
    DetectionFailed { frame: usize },

    #[error("non-finite loss in phase {phase} (epoch {epoch}, batch {batch}): {detail}")]
    NonFinite {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("training diverged in phase {phase} (epoch {epoch}, batch {batch}): loss {loss}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("unmatched ids: missing predictions {missing_predictions:?}, missing truth {missing_truth:?}")]
    IdMismatch {
        missing_predictions: Vec<String>,
        missing_truth: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image encoding error at {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("csv error at {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field, reason: reason.into() }
    }
}
