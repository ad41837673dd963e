use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// The Newton iteration produced NaN or Inf. Carries the residuals seen so far.
    #[error("pseudo-inverse iteration diverged at step {step}")]
    Divergence { step: usize, trace: Vec<f64> },

    #[error("SVD oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("spectral analysis failed: {0}")]
    Analysis(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("backward called without a recorded forward pass")]
    MissingTape,

    #[error("non-finite loss at epoch {epoch}, step {step} (last pinv residuals: {residuals:?})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        residuals: Vec<f64>,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Divergence { .. }
                | Error::OracleUnavailable(_)
                | Error::Analysis(_)
                | Error::NonFiniteLoss { .. }
                | Error::Degenerate(_)
        )
    }
}
