use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter shape error: expected {expected} entries, got {got}")]
    ParamShape { expected: usize, got: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("model coverage error: no channel for {0}")]
    Coverage(String),
    #[error("non-finite value in {op} (trace node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("resource guard: {0}")]
    Resource(String),
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("config mismatch: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Strips `Step` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), Error::NonFinite { .. } | Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
