use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io: {0}")]
    IoStream(#[from] std::io::Error),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocab: {0}")]
    Vocab(String),

    #[error("tokenize: {0}")]
    Tokenize(String),

    #[error("token id {id} out of range for vocab of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("fixation index {index} out of range for {words} words ({context})")]
    FixationOutOfRange {
        index: usize,
        words: usize,
        context: String,
    },

    #[error("gold offset {offset} at step {step} is outside the saccade class range")]
    OffsetOutOfRange { step: usize, offset: i64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("label {0} out of range")]
    Label(String),

    #[error("empty sequence: {0}")]
    Empty(String),

    #[error("split: {0}")]
    Split(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
