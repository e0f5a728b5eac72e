use std::path::PathBuf;

/// Errors raised anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error in {func}: {msg}")]
    Domain { func: &'static str, msg: String },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("ensemble member {member}: {source}")]
    Ensemble {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error at {pointer}: {msg}")]
    Config { pointer: String, msg: String },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("missing artifacts: {0:?}")]
    MissingArtifacts(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(func: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            func,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag, used for the CLI's stderr records and the C error codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Training { .. } => "training",
            Error::Ensemble { source, .. } | Error::Sample { source, .. } => source.kind(),
            Error::Metric(_) => "metric",
            Error::Parse { .. } => "parse",
            Error::Config { .. } => "config",
            Error::Format { .. } => "format",
            Error::MissingArtifacts(_) => "missing_artifacts",
            Error::Io(_) => "io",
        }
    }
}
