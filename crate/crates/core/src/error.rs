use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("weights carry zero mass; cannot scale to {target}")]
    ZeroMass { target: f64 },

    #[error("threshold must be positive, got {0}")]
    NonPositiveThreshold(f64),

    #[error("negative weight {value} at frame {index}")]
    NegativeWeight { index: usize, value: f64 },

    #[error("non-finite weight at frame {index}")]
    NonFiniteWeight { index: usize },

    #[error("initial residual {residual} outside [0, {gamma})")]
    InvalidResidual { residual: f64, gamma: f64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("utterance {id} has no {tier} boundary annotation")]
    MissingAnnotation { id: String, tier: &'static str },

    #[error("segmentation has {segments} segments but {targets} unit targets were given")]
    SegmentCountMismatch { segments: usize, targets: usize },

    #[error("loss term {term} is not a finite non-negative value: {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("training diverged at epoch {epoch}: loss {value}")]
    DivergedLoss { epoch: usize, value: f64 },

    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("utterance {0} has no audio")]
    EmptyUtterance(String),

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: unsupported manifest version {found} (this build reads version {supported})")]
    VersionMismatch {
        path: String,
        found: u32,
        supported: u32,
    },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("hypothesis is empty")]
    EmptyHypothesis,

    #[error("no decisions were recorded")]
    NoDecisions,

    #[error("audio duration must be positive")]
    ZeroAudio,

    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch {
        hypotheses: usize,
        references: usize,
    },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid policy spec `{spec}`: {message}")]
    PolicySpec { spec: String, message: String },

    #[error("invalid oracle spec `{spec}`: {message}")]
    OracleSpec { spec: String, message: String },

    #[error("invalid metrics table: {0}")]
    Table(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration rather than
    /// runtime or I/O failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveThreshold(_)
                | Error::InvalidRange(_)
                | Error::PolicySpec { .. }
                | Error::OracleSpec { .. }
        )
    }
}
