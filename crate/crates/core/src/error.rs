use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes. The CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: axis {axis} has odd extent {extent}; cross-attention needs it even")]
    OddExtent {
        op: &'static str,
        axis: &'static str,
        extent: usize,
    },

    #[error("{op}: kernel {kernel} exceeds extent {extent} on axis {axis}")]
    KernelTooLarge {
        op: &'static str,
        axis: usize,
        kernel: usize,
        extent: usize,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tap `{tap}` has no gradient; build the graph with trainable parameters so taps retain gradients")]
    MissingTapGradient { tap: String },

    #[error("unknown tap `{name}`; available taps: {available:?}")]
    UnknownTap { name: String, available: Vec<String> },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("layer {layer} rejects input: {detail}")]
    LayerInput { layer: String, detail: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss ({0})")]
    NonFiniteLoss(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage-2 fine-tuning needs a stage-1 trained model (epoch counter is 0); pass force to override")]
    UntrainedModel,

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{0}")]
    Data(String),

    #[error("model was saved in {stored} precision but {requested} was requested")]
    PrecisionMismatch {
        stored: &'static str,
        requested: &'static str,
    },

    #[error("parameter `{0}` has different shapes across clients")]
    IncongruentClients(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::Architecture(_)
            | Error::UnknownTap { .. }
            | Error::UntrainedModel
            | Error::Json(_) => ErrorClass::Usage,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
