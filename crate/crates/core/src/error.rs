use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("prompt unavailable: {0}")]
    PromptUnavailable(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, shared by the HTTP layer and the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Validation(_) => "validation",
            Error::MetricUnavailable(_) => "metric_unavailable",
            Error::Protocol(_) => "protocol",
            Error::PromptUnavailable(_) => "prompt_unavailable",
            Error::Checkpoint(_) => "checkpoint",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code used by the CLI. 2 is reserved for usage errors.
    pub fn exit_code(&self) -> i32 {
        exit_code_for(self.code()).unwrap_or(1)
    }
}

/// Exit code for a machine-readable error code, including codes relayed by
/// the service.
pub fn exit_code_for(code: &str) -> Option<i32> {
    Some(match code {
        "invalid_input" => 3,
        "config" => 4,
        "numeric" => 5,
        "validation" => 6,
        "metric_unavailable" => 7,
        "protocol" => 8,
        "prompt_unavailable" => 9,
        "checkpoint" => 10,
        "tensor" => 11,
        "io" => 12,
        "image" => 13,
        "json" => 14,
        _ => return None,
    })
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
