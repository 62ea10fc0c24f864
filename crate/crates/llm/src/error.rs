use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("authentication failed with status {status}")]
    Auth { status: u16 },

    #[error("request failed with status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },

    #[error("transport: {0}")]
    Transport(String),

    #[error("malformed response: {0}")]
    Decode(String),

    #[error(transparent)]
    Core(#[from] ifclust_core::Error),
}

impl LlmError {
    /// Timeouts, connection failures, 429 and 5xx are worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            LlmError::Transport(_) => true,
            _ => false,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            LlmError::Status { status, .. } | LlmError::Auth { status } => Some(*status),
            _ => None,
        }
    }
}
