use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("out-of-vocabulary word `{0}`")]
    OutOfVocabulary(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input sequence")]
    EmptySequence,

    #[error("prompt length {prompt_len} leaves no response tokens in a sequence of length {len}")]
    NoResponse { prompt_len: usize, len: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("need {needed} distractors sharing the attribute, pool has {available}")]
    InsufficientDistractors { needed: usize, available: usize },

    #[error("faithful responses require an answerable prompt")]
    FaithfulOnUnanswerable,

    #[error("AUROC is undefined when only one class is present")]
    SingleClass,

    #[error("cannot aggregate an empty response")]
    EmptyResponse,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("model has no language-modeling head")]
    NoLmHead,

    #[error("model has no detection head")]
    NoDetectionHead,

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
