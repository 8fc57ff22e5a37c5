use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),

    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op}: invalid geometry: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("non-finite value at input {input}, entry {index}")]
    NonFinite { input: usize, index: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },

    #[error("batch norm `{0}` used in eval mode before its running statistics were initialized")]
    UninitializedNorm(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported version {version} in {path}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("truncated payload in {0}")]
    Truncated(PathBuf),

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("shape mismatch for tensor `{name}`: file has {found:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint has unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
