use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("duplicate example id {0:?}")]
    DuplicateId(String),

    #[error("example {id:?}: label {label} out of range for {class_count} classes")]
    LabelOutOfRange {
        id: String,
        label: usize,
        class_count: usize,
    },

    #[error("line {line}: record schema {found} does not match dataset schema {expected}")]
    MixedSchema {
        line: usize,
        expected: &'static str,
        found: &'static str,
    },

    #[error("row {row} sums to {sum} (expected 1 within 1e-6)")]
    RowSum { row: usize, sum: f64 },

    #[error("row {row}, column {column}: probability {value} outside [0, 1]")]
    ProbabilityRange { row: usize, column: usize, value: f64 },

    #[error("invalid distribution shape: {0}")]
    DistributionShape(String),

    #[error("record {id:?}: {message}")]
    RecordMismatch { id: String, message: String },

    #[error("record {id:?}: {source}")]
    InRecord {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown example id {0:?}")]
    UnknownId(String),

    #[error("invalid tokens: {0}")]
    InvalidTokens(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid input rather than a failing environment.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { .. } => false,
            Error::Stage { source, .. } | Error::InRecord { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}

pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
