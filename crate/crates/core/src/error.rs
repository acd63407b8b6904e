use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid params: {0}")]
    InvalidParams(String),
    #[error("token {token} outside vocab of size {vocab}")]
    InvalidToken { token: u32, vocab: u32 },
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("{0}")]
    Config(String),
    #[error("corrupt pool at line {line}: {msg}")]
    CorruptPool { line: usize, msg: String },
    #[error("pool integrity: {0}")]
    Integrity(String),
    #[error("question {0} has no records in the experience pool")]
    MissingQuestion(String),
    #[error("cannot parse {what}: {msg}")]
    Parse { what: String, msg: String },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("non-finite gradient: {0}")]
    NonFinite(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-parsable category, used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidParams(_) => "invalid-params",
            Error::InvalidToken { .. } => "invalid-token",
            Error::InvalidGroup(_) => "invalid-group",
            Error::Config(_) => "config",
            Error::CorruptPool { .. } => "corrupt-pool",
            Error::Integrity(_) => "integrity",
            Error::MissingQuestion(_) => "missing-question",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::NonFinite(_) => "non-finite",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Parse { what: what.into(), msg: msg.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
