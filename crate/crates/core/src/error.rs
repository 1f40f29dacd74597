use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("integration failure from state {state:?} under input {input:?}")]
    Integration { state: Vec<f64>, input: Vec<f64> },

    #[error("abstraction failed at state #{state} input #{input}: {source}")]
    Abstraction {
        state: usize,
        input: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bound construction failed: {0}")]
    BoundConstruction(String),

    #[error("index {index} out of range (size {size})")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("cannot remain in the target: the target has no controlled-invariant core")]
    CannotRemain,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
