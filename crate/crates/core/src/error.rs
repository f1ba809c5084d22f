use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-positive weight {value} in monotone unit")]
    NonPositiveWeight { value: f64 },

    #[error("degenerate unit: limit gap {gap:e} below guard")]
    DegenerateUnit { gap: f64 },

    #[error("conditioning density {density:e} below floor")]
    DensityBelowFloor { density: f64 },

    #[error("could not bracket root for target {target}")]
    BracketFailure { target: f64 },

    #[error("batch normalization: {0}")]
    BatchNorm(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("{0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Whether the error signals a numeric failure (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NonPositiveWeight { .. }
                | Error::DegenerateUnit { .. }
                | Error::DensityBelowFloor { .. }
                | Error::BracketFailure { .. }
                | Error::Diverged { .. }
                | Error::Numeric(_)
        )
    }
}
