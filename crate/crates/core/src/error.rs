use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// A retry loop hit its attempt cap (initialisation or offspring
    /// rejection loop).
    #[error("retry cap of {attempts} attempts exhausted while {context}")]
    RetryCapExhausted { attempts: usize, context: String },
}

impl Error {
    pub(crate) fn parse(pos: usize, msg: impl Into<String>) -> Self {
        Error::Parse { pos, msg: msg.into() }
    }
}
