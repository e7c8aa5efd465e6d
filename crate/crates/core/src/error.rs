use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("operation on a tensor with zero elements")]
    EmptyTensor,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot fold re-parameterized branches: {0}")]
    Fold(String),
    #[error("activation kind error: {0}")]
    Kind(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Arg(String),
    #[error("firing-rate report error: {0}")]
    Report(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
