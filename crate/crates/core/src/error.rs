use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward already ran on this graph; call zero_grad before running it again")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph node {0} references a node that is not earlier in the tape")]
    Cycle(usize),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("contrastive loss needs at least 2 rows per side, got {0}")]
    ContrastiveDegenerate(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("batching contract violated: {0}")]
    MixedBatch(String),

    #[error("ingestion error for sample `{sample}`: {detail}")]
    Ingest { sample: String, detail: String },

    #[error("zero-variance channel {channel} for dataset `{dataset}` ({modality})")]
    ZeroVariance {
        dataset: String,
        modality: String,
        channel: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures that stem from numerics (NaN/Inf) rather than usage or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonFiniteGradient(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Image(_) | Error::Csv(_) | Error::Format(_) | Error::Ingest { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
