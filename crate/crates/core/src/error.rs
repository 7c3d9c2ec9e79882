use thiserror::Error;

/// Errors raised across the library. The CLI maps them onto exit codes.
#[derive(Debug, Error)]
pub enum FcpError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed context: {0}")]
    MalformedContext(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// The conditioning feedback has zero marginal probability. Distinct from
    /// numerical underflow, which never produces this error.
    #[error("feedback is outside the support of the joint (zero marginal)")]
    OutOfSupport,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("enumeration bound exceeded: {responses} responses x {feedbacks} feedbacks (limit {max_responses} x {max_feedbacks})")]
    TooLarge {
        responses: usize,
        feedbacks: usize,
        max_responses: usize,
        max_feedbacks: usize,
    },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("round {round}: rollout buffer is empty")]
    EmptyBuffer { round: usize },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FcpError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FcpError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FcpError>;
