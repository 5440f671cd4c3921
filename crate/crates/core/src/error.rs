use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("patch grid is not exact: ({extent} - {patch}) is not divisible by stride {stride}")]
    NonExactGrid {
        extent: usize,
        patch: usize,
        stride: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,

    #[error("class id {target} out of range for {num_classes} classes")]
    InvalidTarget { target: usize, num_classes: usize },

    #[error("manifest has {available} subjects, batch needs {required}")]
    InsufficientSubjects { available: usize, required: usize },

    #[error("subject {subject} has {available} samples, split needs {required}")]
    InsufficientSamples {
        subject: String,
        available: usize,
        required: usize,
    },

    #[error("no embedding for sample {0}")]
    MissingEmbedding(String),

    #[error("score set is empty ({0})")]
    EmptyScores(&'static str),

    #[error("no operating point reaches FMR <= {target}")]
    UnreachableOperatingPoint { target: f64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("dataset at {0} is empty")]
    EmptyDataset(PathBuf),

    #[error("malformed dataset layout at {path}: {reason}")]
    MalformedLayout { path: PathBuf, reason: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::NonExactGrid { .. }
                | Error::ShapeMismatch { .. }
                | Error::InvalidConfig(_)
                | Error::InvalidTarget { .. }
                | Error::InsufficientSubjects { .. }
                | Error::InsufficientSamples { .. }
                | Error::EmptyDataset(_)
                | Error::MalformedLayout { .. }
                | Error::EmptyScores(_)
        )
    }
}
