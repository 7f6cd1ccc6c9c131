use thiserror::Error;

#[derive(Debug, Error)]
pub enum TvslError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label vector selects no sources")]
    EmptySelection,

    #[error("class index {index} out of range for a vocabulary of {len} classes")]
    ClassIndex { index: usize, len: usize },

    #[error("unknown class name {0:?}")]
    UnknownClass(String),

    #[error("invalid mixture: {0}")]
    Mixture(String),

    #[error("learnable prompt context cannot be used in zero-shot mode")]
    PromptInZeroShot,

    #[error("non-finite {0} loss")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = TvslError> = std::result::Result<T, E>;
