use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid causal graph: {0}")]
    InvalidGraph(String),
    #[error("graph contains a cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("value {value} of `{attribute}` is outside the support of its mechanism")]
    Domain { attribute: String, value: f64 },
    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("non-finite loss at {stage}: {detail}")]
    NonFinite { stage: String, detail: String },
    #[error("graph hash mismatch: artifact built for {found}, current graph is {expected}")]
    GraphHashMismatch { expected: String, found: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation auxiliary {0} was also used for fine-tuning")]
    AuxiliaryReuse(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("dataset error in record `{record}`: {detail}")]
    Dataset { record: String, detail: String },
    #[error("scene sampling gave up after {0} rejected draws")]
    RejectionLimit(usize),
    #[error("mixed provenance: {0}")]
    Provenance(String),
    #[error("output root is locked by another run ({0})")]
    Locked(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Metric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is caused by user input rather than the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidGraph(_)
                | Error::Cycle(_)
                | Error::UnknownAttribute(_)
                | Error::InvalidIntervention(_)
                | Error::Config(_)
                | Error::Domain { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
