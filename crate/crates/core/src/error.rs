use std::path::PathBuf;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown primitive kind `{0}`")]
    UnknownPrimitive(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("computation tape already consumed")]
    TapeConsumed,

    #[error("computation tape is not recording")]
    NotRecording,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid block spec: {0}")]
    BlockSpec(String),

    #[error("token count {tokens} exceeds attention cap {cap}")]
    TokenCap { tokens: usize, cap: usize },

    #[error("width {width} not in configured width set {set:?}")]
    Width { width: usize, set: Vec<usize> },

    #[error("block {block} has {count} paths, above traversal cap {cap}; use evolutionary search")]
    TraversalCap {
        block: usize,
        count: u128,
        cap: usize,
    },

    #[error("invalid architecture at {position}: {reason}")]
    Architecture { position: String, reason: String },

    #[error("unknown block path `{path}` for block {block}")]
    UnknownBlockPath { block: usize, path: String },

    #[error("invalid configuration at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("correlation input error: {0}")]
    Correlation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable kebab-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::UnknownPrimitive(_) => "unknown-primitive",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::TapeConsumed => "tape-consumed",
            Error::NotRecording => "not-recording",
            Error::MissingGradient(_) => "missing-gradient",
            Error::UnknownParameter(_) => "unknown-parameter",
            Error::BlockSpec(_) => "block-spec",
            Error::TokenCap { .. } => "token-cap",
            Error::Width { .. } => "width",
            Error::TraversalCap { .. } => "traversal-cap",
            Error::Architecture { .. } => "architecture",
            Error::UnknownBlockPath { .. } => "unknown-block-path",
            Error::Config { .. } => "config",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Correlation(_) => "correlation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
