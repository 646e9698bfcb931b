use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (bad shape, range, or value).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A function evaluated during finite differencing returned a non-finite value.
    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    /// The loss became non-finite while training.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Training { epoch: usize, loss: f64 },

    /// An ensemble member failed to train.
    #[error("ensemble member {member} failed: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shorthand for returning a [`Error::Contract`] when `cond` is false.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
