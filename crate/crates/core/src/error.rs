use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible corpus configuration: {0}")]
    ConfigInfeasible(String),

    #[error("field `{field}` does not fit on a {res}px page")]
    LayoutOverflow { field: String, res: usize },

    #[error("bad resolution: cannot resample {from}px to {to}px")]
    BadResolution { from: usize, to: usize },

    #[error("answer `{0}` does not occur in the document")]
    NoOccurrence(String),

    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(char),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("split count K={0} must be even and at least 2")]
    BadK(usize),

    #[error("no valid shuffle partner for document {doc_id} after {draws} draws")]
    NoValidPartner { doc_id: String, draws: usize },

    #[error("question `{0}` does not belong to any template")]
    UnknownTemplate(String),

    #[error("ANLS needs at least one gold answer")]
    EmptyGolds,

    #[error("missing checkpoint for split {split} (expected {path})")]
    MissingCheckpoint { split: usize, path: PathBuf },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("config parse error at line {line}, column {column}: {msg}")]
    ConfigParse { line: usize, column: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }
}
