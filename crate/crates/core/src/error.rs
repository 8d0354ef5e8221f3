use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{file}: record {record}: malformed box {bbox:?}")]
    MalformedBox {
        file: String,
        record: String,
        bbox: Vec<f64>,
    },

    #[error("{file}: unknown label `{label}` (valid labels: {valid})")]
    UnknownLabel { file: String, label: String, valid: String },

    #[error("vocabulary is empty or missing special token `{0}`")]
    Vocab(String),

    #[error("invalid synthetic domain spec: {0}")]
    InvalidSpec(String),

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid model input: {0}")]
    InvalidInput(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("source document `{0}` carries no labels")]
    MissingLabels(String),

    #[error("question {0} has an empty gold answer set")]
    EmptyGold(usize),

    #[error("no prediction records")]
    NoRecords,

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
