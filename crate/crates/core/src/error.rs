use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the explanation pipeline.
#[derive(Debug, Error)]
pub enum PgceError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("window {window} of channel {channel} has no non-missing samples")]
    EmptyWindow { channel: String, window: usize },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("invalid window grid: {0}")]
    InvalidGrid(String),

    #[error("invalid physics spec: {0}")]
    InvalidSpec(String),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("instance {0} has no class label")]
    Unlabeled(usize),

    #[error("dataset contains a single class")]
    SingleClassDataset,

    #[error("class {class} has {members} members, fewer than the {folds} folds requested")]
    InsufficientClassMembers { class: u8, members: usize, folds: usize },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("invalid GA configuration: {0}")]
    InvalidConfig(String),

    #[error("no candidate reached the target class within the generation budget")]
    NoValidCandidate,

    #[error("slice [{start}, {end}) lies outside the observation window [{window_start}, {window_end})")]
    SliceOutsideWindow {
        start: usize,
        end: usize,
        window_start: usize,
        window_end: usize,
    },

    #[error("counterfactual has no feature {0}")]
    MissingCfeFeature(String),

    #[error("sequence is empty")]
    EmptySequence,

    #[error("counterfactual set is empty")]
    EmptySet,

    #[error("instance sets differ between methods: {0}")]
    MismatchedInstanceSets(String),

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("irregular cadence at row {row}: {message}")]
    IrregularCadence { row: usize, message: String },

    #[error("file {0} contains no data rows")]
    EmptyFile(PathBuf),

    #[error("event {index} [{start}, {end}) lies outside the series")]
    EventOutsideSeries { index: usize, start: String, end: String },

    #[error("event {index} spans {actual} samples, expected the fixed observation length {expected}")]
    EventLengthMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },

    #[error("invalid event catalog: {0}")]
    InvalidCatalog(String),

    #[error("unsupported {kind} format version {found} (expected {expected})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl PgceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PgceError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: usize, actual: usize) -> Self {
        PgceError::DimensionMismatch { expected, actual }
    }

    /// True for errors caused by malformed input files or arguments rather than
    /// a failure during computation. The CLI maps these to exit code 2.
    pub fn is_usage_error(&self) -> bool {
        matches!(
            self,
            PgceError::Schema { .. }
                | PgceError::EmptyFile(_)
                | PgceError::IrregularCadence { .. }
                | PgceError::InvalidCatalog(_)
                | PgceError::UnsupportedVersion { .. }
                | PgceError::TomlDe(_)
                | PgceError::Json(_)
                | PgceError::InvalidConfig(_)
                | PgceError::InvalidHyperparams(_)
        ) || matches!(self, PgceError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub type Result<T> = std::result::Result<T, PgceError>;
