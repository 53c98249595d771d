use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data failed validation (non-finite values, empty vectors).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("decode error: {0}")]
    Decode(String),

    /// Workers disagreed on the collective sequence or one never arrived.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at iteration {iteration}: loss {loss:e} exceeds limit {limit:e}")]
    Diverged { iteration: usize, loss: f64, limit: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
