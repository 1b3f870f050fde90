use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("prompt overflow: assembled prompt is {got} tokens, context length is {limit}")]
    PromptOverflow { got: usize, limit: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("poisoned text generation failed after {retries} retries: best score {best:.6} did not exceed threshold {threshold:.6}")]
    RetrievabilityNotMet {
        retries: usize,
        best: f64,
        threshold: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
