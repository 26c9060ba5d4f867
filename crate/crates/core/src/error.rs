use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: {reason}")]
    MalformedRow {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("unknown scale id `{0}`")]
    UnknownScale(String),
    #[error("duplicate trait row for participant `{participant}` ({scale} item {item})")]
    DuplicateTraitRow {
        participant: String,
        scale: String,
        item: usize,
    },
    #[error("participant `{participant}`: every item of scale {scale} is missing")]
    UnresolvableScale { participant: String, scale: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: String },
    #[error("series of length {len} is too short for embedding (m={dimension}, tau={delay})")]
    SeriesTooShort {
        len: usize,
        dimension: usize,
        delay: usize,
    },
    #[error("degenerate training data: {0}")]
    Degenerate(String),
    #[error("leakage audit failed with {0} violation(s)")]
    AuditFailed(usize),
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
