use std::path::{Path, PathBuf};

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

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("unknown edge label {label} (parameter tables cover {available} labels)")]
    UnknownLabel { label: usize, available: usize },

    #[error("invalid bounding box {0:?}")]
    InvalidBox([f64; 4]),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("line {line}: {msg}")]
    AtLine { line: usize, msg: String },

    #[error("missing union feature for pair ({0}, {1})")]
    MissingUnionFeature(usize, usize),

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("vocabulary is empty after filtering")]
    EmptyVocabulary,

    #[error("non-finite loss at iteration {iteration} (scene `{scene}`)")]
    NonFiniteLoss { iteration: usize, scene: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::MissingParameter(_) => "missing_parameter",
            Error::UnknownLabel { .. } => "unknown_label",
            Error::InvalidBox(_) => "invalid_box",
            Error::Graph(_) => "graph",
            Error::AtLine { .. } => "parse",
            Error::MissingUnionFeature(..) => "missing_union_feature",
            Error::UnknownToken(_) => "unknown_token",
            Error::EmptyVocabulary => "empty_vocabulary",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
            Error::File { .. } | Error::Io(_) => "io",
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

fn at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(at(path))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(at(path))
}

pub fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(at(path))
}

pub fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(at(path))
}
