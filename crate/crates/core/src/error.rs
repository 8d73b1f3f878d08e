use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward() needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward() already ran on this tape; run a new forward pass first")]
    BackwardTwice,

    #[error("non-finite value at coordinate {coord} during gradient check")]
    NonFinite { coord: usize },

    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("face {face} repeats vertex {vertex}")]
    DegenerateFace { face: usize, vertex: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}:{line}: {msg}")]
    Line { path: PathBuf, line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used by the command line for machine-parsable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::BackwardTwice => "backward_twice",
            Error::NonFinite { .. } => "non_finite",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::DegenerateFace { .. } => "degenerate_face",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
            Error::Mismatch(_) => "mismatch",
            Error::MissingGrad(_) => "missing_grad",
            Error::Eigen(_) => "eigen",
            Error::EmptyDataset => "empty_dataset",
            Error::Format { .. } => "format",
            Error::Line { .. } => "line",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
