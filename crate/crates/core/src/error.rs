use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: u64, loss: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("step {step} out of range: trace holds {len} steps")]
    StepOutOfRange { step: usize, len: usize },

    #[error("sketch spec mismatch: {0}")]
    SketchMismatch(String),

    #[error("singular Hessian: {0}")]
    SingularHessian(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("index provenance mismatch: {0}")]
    Provenance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Failures caused by the numbers themselves rather than by inputs or files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericOverflow(_)
                | Error::Divergence { .. }
                | Error::SingularHessian(_)
                | Error::NonConvergence(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Csv(_) | Error::Parse { .. })
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
