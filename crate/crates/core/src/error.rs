use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("rank error: requested rank {requested}, allowed range is 1..={max}")]
    Rank { requested: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error(
        "budget error: {kernel} working set reaches {working_set} bytes at buffer `{buffer}`, \
         budget is {budget} bytes"
    )]
    Budget {
        kernel: &'static str,
        buffer: &'static str,
        working_set: u64,
        budget: u64,
    },

    #[error("accounting error: {0}")]
    Accounting(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
