use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("parameter sets are not congruent: {0}")]
    Incongruent(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite {what}{}", .step.map(|s| format!(" at inner step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<usize> },

    #[error("config: {0}")]
    Config(String),

    #[error("file format: {0}")]
    Format(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures that come from the numbers themselves (a diverged
    /// loss, a gradient oracle mismatch) rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::GradCheck(_))
    }
}
