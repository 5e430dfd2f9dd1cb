use thiserror::Error;

pub type BenchResult<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Engine(#[from] stagecoach::Error),
    #[error("could not launch consumer `{cmd}`: {reason}")]
    ConsumerLaunchFailure { cmd: String, reason: String },
    #[error("consumer failed: {0}")]
    ConsumerFailed(String),
    #[error("report output: {0}")]
    Report(String),
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Report(e.to_string())
    }
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Report(e.to_string())
    }
}
