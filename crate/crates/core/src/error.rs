use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} {index} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("division hazard at prompt {prompt}: reward std is zero and var_epsilon is 0")]
    DivisionHazard { prompt: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at stage {stage}, iteration {iteration}: {reason}")]
    Diverged {
        stage: usize,
        iteration: usize,
        reason: String,
        /// State at the end of the last finite iteration.
        last_good: Box<crate::trainer::TrainState>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
