use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("duplicate id: {0}")]
    DuplicateId(String),
    #[error("missing item: {0}")]
    MissingItem(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient inventory: need {budget}, have {available}")]
    InsufficientInventory { budget: u64, available: u64 },
    #[error("no eligible candidates for {0}")]
    NoCandidates(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("singular design matrix: {0}")]
    SingularDesign(String),
}

impl Error {
    /// Stable machine-readable error code, used by the CLI on stderr.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Format(_) => "FormatError",
            Error::CorruptBundle(_) => "CorruptBundle",
            Error::InvalidInput(_) => "InvalidInput",
            Error::DuplicateId(_) => "DuplicateId",
            Error::MissingItem(_) => "MissingItem",
            Error::Shape(_) => "ShapeError",
            Error::InsufficientInventory { .. } => "InsufficientInventory",
            Error::NoCandidates(_) => "NoCandidates",
            Error::Undefined(_) => "Undefined",
            Error::SingularDesign(_) => "SingularDesign",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
