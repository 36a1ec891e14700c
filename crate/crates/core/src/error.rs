use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),

    #[error("no documents could be ingested")]
    NoDocuments,

    #[error("sentence pool is empty")]
    EmptyPool,

    #[error("keyword set is empty")]
    EmptyKeywords,

    #[error("unknown sentence id {0}")]
    UnknownSentence(String),

    #[error("term {0:?} is not in the latest frequency report (use force to add it anyway)")]
    TermNotReported(String),

    #[error("sequence length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("committee needs at least one prediction")]
    EmptyCommittee,

    #[error("CRF objective is not finite")]
    NonFiniteObjective,

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("model file format version {0} is not supported")]
    ModelVersion(u32),

    #[error("annotation for {sentence_id} rejected: {reason}")]
    AnnotationRejected { sentence_id: String, reason: String },

    #[error("annotations refer to different sentences")]
    SentenceMismatch,

    #[error("density cache was computed for pool {expected} but the pool is {found}")]
    StaleDensityCache { expected: String, found: String },

    #[error("density cache has no entry for sentence {0}")]
    MissingDensity(String),

    #[error("no vector for sentence {0}")]
    MissingVector(String),

    #[error("batch still has sentences without gold annotation: {0:?}")]
    PendingAnnotations(Vec<String>),

    #[error("invalid fold count k={k} for {n} sentences")]
    InvalidFolds { k: usize, n: usize },

    #[error("project directory {0} is not empty")]
    ProjectExists(PathBuf),

    #[error("project is locked by another writer ({0})")]
    ProjectLocked(PathBuf),

    #[error("iteration {found} does not follow iteration {current}")]
    IterationOrder { current: u32, found: u32 },

    #[error("corrupt log {path} at line {line}: {message}")]
    CorruptLog { path: PathBuf, line: usize, message: String },

    #[error("annotation sets cover different sentences: {0:?}")]
    CoverageMismatch(Vec<String>),

    #[error("no gold annotations to export")]
    EmptyGold,

    #[error("{0}")]
    Workflow(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
