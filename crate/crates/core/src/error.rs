use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A hyper-parameter or experiment setting is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition on call arguments was violated.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("format version mismatch: file has version {found}, this build reads version {expected}")]
    Version { found: u16, expected: u16 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("malformed data at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data format, 4 runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Truncated { .. }
            | Error::Format { .. }
            | Error::Schema(_)
            | Error::Json(_) => 3,
            Error::Shape(_) | Error::Divergence { .. } | Error::Numeric(_) | Error::Io(_) => 4,
        }
    }
}
