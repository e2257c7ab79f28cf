use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for size {size} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("loss mask selects no positions")]
    EmptyLoss,
    #[error("sequence of {len} slots exceeds the limit of {limit}")]
    Length { len: usize, limit: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownStrategy(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
