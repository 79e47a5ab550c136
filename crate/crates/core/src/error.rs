use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CatnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CatnError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unknown op `{0}`")]
    UnknownOp(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} is outside the embedding table of {rows} rows")]
    OutOfVocabulary { id: usize, rows: usize },

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("missing document: {0}")]
    MissingDocument(String),

    #[error("unknown variant `{0}` (expected basic, attn, separate or full)")]
    UnknownVariant(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("evaluation pair ({user}, {item}) is part of the training data")]
    Leakage { user: String, item: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CatnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CatnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        CatnError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
