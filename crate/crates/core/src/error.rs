//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants are grouped by how callers are expected
/// to react: configuration and shape problems are caller bugs, precondition
/// failures mean the requested operation does not apply to the given data,
/// and numeric failures abort a computation that went non-finite.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not match the operation contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or malformed input file.
    #[error("config error: {0}")]
    Config(String),

    /// Operation called in a state that does not permit it.
    #[error("state error: {0}")]
    State(String),

    /// Caller violated an operation contract (e.g. unequal MMD batch sizes).
    #[error("contract error: {0}")]
    Contract(String),

    /// Data does not satisfy the operation's precondition.
    #[error("precondition unmet: {0}")]
    Precondition(String),

    /// A value went NaN/Inf or exceeded a numeric guard.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Rejection sampling could not reach a requested class region.
    #[error("generation error: class {class}: {detail}")]
    Generation { class: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to:
    /// 2 config/validation, 3 precondition unmet, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::State(_)
            | Error::Contract(_)
            | Error::Precondition(_)
            | Error::Generation { .. }
            | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
