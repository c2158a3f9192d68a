use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite sample at denoising step {step}")]
    SamplerNonFinite { step: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cache coherence: {0}")]
    CacheCoherence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("environment step {step} failed: {reason}")]
    EnvStep { step: usize, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::SamplerNonFinite { .. } => "sampler_non_finite",
            Error::Usage(_) => "usage",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::CacheCoherence(_) => "cache_coherence",
            Error::Checkpoint(_) => "checkpoint",
            Error::EnvStep { .. } => "env_step",
            Error::Dataset(_) => "dataset",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, node: usize, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            node,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
