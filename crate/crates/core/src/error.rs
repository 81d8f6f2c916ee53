use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("config error in {section}.{key}: {message}")]
    Config {
        section: String,
        key: String,
        message: String,
    },

    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown job_type {0:?}")]
    UnknownJobType(String),

    #[error("authentication rejected by teacher endpoint (HTTP {status})")]
    Auth { status: u16 },

    #[error("teacher request failed: {0}")]
    Http(String),

    #[error("malformed teacher response: {0}")]
    MalformedResponse(String),

    #[error("logits/sample misalignment at sample {sample_index}: {message}")]
    Alignment { sample_index: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },

    #[error("reward source failed: {0}")]
    Reward(String),

    #[error("stage {stage} failed: {source} (partial outputs: {partial:?})")]
    Stage {
        stage: String,
        partial: Vec<PathBuf>,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(section: &str, key: &str, message: impl Into<String>) -> Self {
        Error::Config {
            section: section.to_string(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    /// True for errors that stem from configuration rather than execution.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Syntax { .. }
                | Error::UnknownJobType(_)
                | Error::ModelConfig(_)
        )
    }
}
