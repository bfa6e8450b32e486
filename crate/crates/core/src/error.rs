use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed record at line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty gold answers at line {line}")]
    EmptyGoldAnswers { line: usize },

    #[error("duplicate question id {0}")]
    DuplicateQuestion(String),

    #[error("duplicate document id {0}")]
    DuplicateDocument(String),

    #[error("duplicate document id {doc_id} in run for question {question_id}")]
    DuplicateDocumentInRun { question_id: String, doc_id: String },

    #[error("insufficient eligible documents: need {need}, have {have}")]
    InsufficientDocuments { need: usize, have: usize },

    #[error("run question id {run} does not match question {question}")]
    QuestionMismatch { run: String, question: String },

    #[error("no retrieval run for question {0}")]
    MissingRun(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error(
        "quota unfillable for question {question_id}: relevant need {relevant_needed} have {relevant_available}, \
         noisy need {noisy_needed} have {noisy_available}"
    )]
    QuotaUnfillable {
        question_id: String,
        relevant_needed: usize,
        relevant_available: usize,
        noisy_needed: usize,
        noisy_available: usize,
    },

    #[error("CoN prompt requires ≥1 passage")]
    EmptyPassages,

    #[error("missing exemplar for note type ({0})")]
    MissingExemplar(char),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("HTTP status {status}: {body}")]
    Http { status: u16, body: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("no scripted rule matched the prompt")]
    NoMatchingRule,

    #[error("cache corrupted at {path} line {line}: {message}")]
    CacheCorrupted {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unparseable output: {0}")]
    Unparseable(String),

    #[error("invalid answer span in record {record}: {message}")]
    InvalidSpan { record: String, message: String },

    #[error("items span mixed conditions: expected {expected}, found {found}")]
    MixedConditions { expected: String, found: String },

    #[error("config digest mismatch in {dir}: existing {existing}, requested {requested}")]
    ConfigDigestMismatch {
        dir: PathBuf,
        existing: String,
        requested: String,
    },

    #[error(
        "backend unavailable after {completed} records (checkpoint at {checkpoint}): {reason}"
    )]
    CollectionAborted {
        completed: usize,
        checkpoint: String,
        reason: String,
    },

    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
