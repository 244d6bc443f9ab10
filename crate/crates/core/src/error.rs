use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("evaluation error at parameter {index}: {message}")]
    Evaluation { index: usize, message: String },
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("divergence at step {step}: loss {loss:e}")]
    Divergence { step: usize, loss: f64 },
    #[error("rank-deficient sample matrix ({0}); use a regularized solve")]
    RankDeficient(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// An I/O error prefixed with the path it concerns.
    pub fn io_at(e: std::io::Error, path: &std::path::Path) -> Error {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Short machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Argument(_) => "argument",
            Error::Configuration(_) => "configuration",
            Error::State(_) => "state",
            Error::Format(_) => "format",
            Error::Evaluation { .. } => "evaluation",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Divergence { .. } => "divergence",
            Error::RankDeficient(_) => "rank_deficient",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
