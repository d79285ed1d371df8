use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed detection record at index {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },

    #[error("gallery is empty after filtering")]
    EmptyGallery,

    #[error("no admissible patch for concept `{0}`")]
    NoPatchForConcept(String),

    #[error("empty sentence")]
    EmptySentence,

    #[error("sentence too short: {len} words (minimum {min})")]
    SentenceTooShort { len: usize, min: usize },

    #[error("augmentation leaves {0} tokens")]
    AugmentTooAggressive(usize),

    #[error("sequence of length {len} exceeds cap {cap}")]
    SequenceTooLong { len: usize, cap: usize },

    #[error("image record has no regions")]
    EmptyImage,

    #[error("zero-norm vector in cosine similarity")]
    ZeroVectorInCosine,

    #[error("non-finite value encountered: {0}")]
    NumericalDivergence(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
