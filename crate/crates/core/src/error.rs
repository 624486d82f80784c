use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid query: {field}: {message}")]
    InvalidQuery { field: String, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("index format error: {0}")]
    Format(String),

    #[error("checksum mismatch in section `{0}`")]
    Checksum(&'static str),

    #[error("unsupported index version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn query(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidQuery {
            field: field.into(),
            message: message.into(),
        }
    }
}
