use std::path::PathBuf;

/// Errors produced by the interaction toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("variable count {0} outside supported range 1..={max}", max = crate::lattice::MAX_VARIABLES)]
    VariableCount(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: schema error: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("optimization diverged at iteration {iteration}: loss is not finite")]
    Optimization {
        iteration: usize,
        /// Last iterate whose loss was finite.
        last_stable: Box<crate::decomposition::DecompositionParams>,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("value table incomplete: missing masks {missing:?}")]
    Incomplete { missing: Vec<usize> },

    #[error("ensemble error: {0}")]
    Ensemble(String),

    #[error("masking specs are not comparable: {left} vs {right}")]
    Comparability { left: String, right: String },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable identifier for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::VariableCount(_) => "variable-count",
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "non-finite",
            Error::Domain(_) => "domain",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                "input-not-found"
            }
            Error::Io { .. } => "io",
            Error::Optimization { .. } => "optimization",
            Error::Training(_) => "training",
            Error::Incomplete { .. } => "incomplete",
            Error::Ensemble(_) => "ensemble",
            Error::Comparability { .. } => "comparability",
            Error::Config(_) => "config",
        }
    }
}
