//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FtnError>;

/// All failure modes surfaced by the library.
///
/// The CLI maps `Config` and `Usage` to exit code 2 and everything else
/// to exit code 1.
#[derive(Debug, Error)]
pub enum FtnError {
    /// Incompatible tensor shapes, reported with both offenders.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// API misuse, e.g. backward() on a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Input value outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed dataset on disk; names the file, row and violated rule.
    #[error("ingestion error in {file} (row {row}): {rule}")]
    Ingestion {
        file: String,
        row: usize,
        rule: String,
    },

    /// Structurally valid but unusable data (too short, empty split, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Training-loop failure (NaN gradient or loss).
    #[error("training error: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FtnError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FtnError::Io {
            path: path.into(),
            source,
        }
    }
}
