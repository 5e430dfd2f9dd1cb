use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("variable `{0}` already declared")]
    DuplicateName(String),
    #[error("invalid variable name `{0}`")]
    InvalidName(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("variable `{0}` not declared on this stream")]
    UnknownVariable(String),
    #[error("a step is already open")]
    StepAlreadyOpen,
    #[error("no step is open")]
    StepNotOpen,
    #[error("payload size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("selection out of bounds: {0}")]
    SelectionOutOfBounds(String),
    #[error("rank {rank} may not write scalar variable `{name}` (only rank 0 owns scalars)")]
    NotOwner { rank: u32, name: String },
    #[error("variable `{0}` was already put in this step")]
    AlreadyPut(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("bad magic at offset {offset}: expected {expected:?}")]
    BadMagic { offset: u64, expected: &'static str },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("codec error: {0}")]
    Codec(String),
    #[error("payload of {len} bytes is not a multiple of element size {elem_size}")]
    SizeNotMultiple { len: usize, elem_size: usize },
    #[error("malformed metadata: {0}")]
    Format(String),

    #[error("step {0} is incomplete")]
    IncompleteStep(u64),
    #[error("variable `{0}` not found")]
    VariableNotFound(String),
    #[error("step {0} not found")]
    StepNotFound(u64),
    #[error("rank mismatch: {0} vs {1} dimensions")]
    RankMismatch(usize, usize),

    #[error("invalid aggregator count: {0}")]
    InvalidAggregatorCount(String),
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("drain verification failed: {0}")]
    DrainVerifyFailure(String),

    #[error("failed to bind {endpoint}: {source}")]
    BindFailure {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("failed to connect to {endpoint}: {source}")]
    ConnectFailure {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Attach a context string to raw `io::Result`s.
pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::io(context(), e))
    }
}
