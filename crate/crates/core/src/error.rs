use thiserror::Error;

/// Unified error type for the crate.
///
/// Variants are grouped by the contract they enforce rather than by module:
/// shape/dimension violations, numeric failures, API-contract misuse, bad
/// configuration, bad external data, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. Names the graph node or operation.
    #[error("dimension error at {node}: {detail}")]
    Dimension { node: String, detail: String },

    /// A computed value is NaN or infinite, or a numeric procedure failed.
    #[error("numeric error at {node}: {detail}")]
    Numeric { node: String, detail: String },

    /// An operation was called in a state its contract forbids.
    #[error("contract error: {0}")]
    Contract(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Caller-supplied data (ids, labels, indices) is invalid.
    #[error("input error: {0}")]
    Input(String),

    /// Classifier-slot allocation failed (duplicate class ids, capacity).
    #[error("allocation error: {0}")]
    Allocation(String),

    /// A requested name, id, or key does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// External data failed to parse or violated the ingestion format.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A run-level validation check failed before any work started.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension { node: node.into(), detail: detail.into() }
    }

    pub fn numeric(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { node: node.into(), detail: detail.into() }
    }
}
