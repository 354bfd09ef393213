use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("vocabulary error: unknown word `{0}`")]
    Vocabulary(String),
    #[error("length error: {len} tokens exceed the context length {max}")]
    Length { len: usize, max: usize },
    #[error("sizing error: {0}")]
    Sizing(String),
    #[error("lookup error: sample `{0}` not in manifest")]
    Lookup(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable tag, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Vocabulary(_) => "vocabulary",
            Error::Length { .. } => "length",
            Error::Sizing(_) => "sizing",
            Error::Lookup(_) => "lookup",
            Error::Divergence(_) => "divergence",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
