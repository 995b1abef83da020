//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShopError {
    /// An action that is not part of the current observation's action set.
    #[error("illegal action: {0}")]
    IllegalAction(String),

    /// A caller broke an API precondition (out-of-range id, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training diverged or produced non-finite numbers.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A worker did not answer within the retry policy.
    #[error("worker failure: {0}")]
    Worker(String),

    /// Bad run configuration (unknown key, unparsable value, missing field).
    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
