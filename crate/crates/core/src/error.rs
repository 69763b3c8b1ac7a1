use std::path::PathBuf;

/// Library error. Each variant names the module that raised it so the CLI
/// can attribute failures and pick an exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("feature_store: {0}")]
    Store(String),

    #[error("feature_store: {path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("feature_store: record `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("feature_store: bundle: {0}")]
    Bundle(String),

    #[error("aleatoric: {0}")]
    Aleatoric(String),

    #[error("epistemic: {0}")]
    Epistemic(String),

    #[error("conformal: {0}")]
    Conformal(String),

    #[error("controller: {0}")]
    Controller(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("policy: {0}")]
    Policy(String),

    #[error("eval: {0}")]
    Eval(String),

    /// A computation produced a non-finite value or a factorization failed.
    #[error("{module}: numeric failure: {message}")]
    Numeric {
        module: &'static str,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse failure classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Numeric { .. } => ErrorClass::Numeric,
            Error::Config(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(module: &'static str, message: impl Into<String>) -> Self {
        Error::Numeric {
            module,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
