//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: unknown theme label `{label}`")]
    UnknownTheme {
        path: PathBuf,
        line: usize,
        label: String,
    },

    #[error("{path}:{line}: duplicate conversation id `{id}`")]
    DuplicateConversation {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("{path}:{line}: conversation `{id}` has no gold themes in a labeled split")]
    MissingGold {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("theme set is empty or contains duplicates")]
    InvalidThemeSet,

    #[error("lattice `{id}`: arc {from}->{to} violates acyclic node order")]
    LatticeCycle { id: String, from: u32, to: u32 },

    #[error("lattice `{id}`: negative arc score {score}")]
    LatticeNegativeScore { id: String, score: f64 },

    #[error("conversation `{id}` is empty")]
    EmptyConversation { id: String },

    #[error("train corpus is empty")]
    EmptyTrainCorpus,

    #[error(
        "feature selection kept nothing (purity floor {purity_floor}, df floor {df_floor})"
    )]
    EmptyFeatureSet { purity_floor: f64, df_floor: usize },

    #[error("theme `{0}` has no training conversations")]
    ThemeWithoutTrainData(String),

    #[error("theme `{0}` has no single-label training conversations")]
    ThemeWithoutSingleLabelData(String),

    #[error("density sensitivity lambda must be >= 1, got {0}")]
    InvalidLambda(f64),

    #[error("missing {system} hypothesis for conversation `{id}`")]
    MissingSystemOutput { system: String, id: String },

    #[error("no gold annotation available for conversation `{0}`")]
    GoldNotFound(String),

    #[error("development set is empty")]
    EmptyDevSet,

    #[error("no hypothesis provided for conversation `{0}`")]
    MissingHypothesis(String),

    #[error("empty hypothesis for conversation `{0}`")]
    EmptyHypothesis(String),

    #[error("survey set for level {0} is empty")]
    EmptySurveySet(String),

    #[error("rule references unknown theme `{0}`")]
    RuleUnknownTheme(String),

    #[error("{path}:{line}: cannot parse rule file: {msg}")]
    RuleParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("model bundle format version {found} is not supported (expected {expected})")]
    BundleVersionMismatch { found: u32, expected: u32 },

    #[error("model bundle is corrupt: {0}")]
    BundleCorrupt(String),

    #[error("invalid generator spec: {0}")]
    InvalidGeneratorSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
