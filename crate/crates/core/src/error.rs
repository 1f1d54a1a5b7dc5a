use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("template error: {0}")]
    Template(String),

    #[error("source index {index} out of range for a context with {len} sources")]
    SourceIndex { index: usize, len: usize },

    #[error("source {0} is empty")]
    EmptySource(usize),

    #[error("context has no sources")]
    EmptyContext,

    #[error("response is empty")]
    EmptyResponse,

    #[error("sequence of {len} tokens exceeds the model maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("backend does not support {0}")]
    CapabilityMissing(&'static str),

    #[error("session fork at {position} beyond cached length {cached}")]
    ForkBeyondCache { position: usize, cached: usize },

    #[error("token {0} cannot be scored by the model")]
    UnscorableToken(u32),

    #[error("tokenizer mismatch: target uses {target}, proxy uses {proxy}")]
    TokenizerMismatch { target: String, proxy: String },

    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid pipeline: {0}")]
    InvalidPipeline(String),

    #[error("degenerate ablation design: {0}")]
    DegenerateDesign(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
