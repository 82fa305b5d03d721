use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset line that does not satisfy the record schema.
    #[error("{path}:{line}: field `{field}`: {reason}")]
    Dataset {
        path: PathBuf,
        line: usize,
        field: &'static str,
        reason: String,
    },

    /// A value-level invariant was violated (duplicate choices, too many labels, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Configuration problems, reported all at once.
    #[error("configuration is invalid:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    /// The backend rejected our credentials or is otherwise misconfigured.
    #[error("backend configuration error: {0}")]
    Config(String),

    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("no recorded completion for request key `{key}`")]
    CacheMiss { key: String },

    #[error("corrupted cache entry for key `{key}`: {reason}")]
    CorruptCacheEntry { key: String, reason: String },

    #[error("{path}:{line}: unreadable cache line: {reason}")]
    CorruptCacheLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// The divide histogram had no parsed answer, so choice filtering and
    /// rationale reuse have nothing to work with.
    #[error("question `{question_id}` has no parsed divide answers; fall back to ZTCOT")]
    EmptySupport { question_id: String },

    #[error("gold label missing for: {}", .ids.join(", "))]
    MissingGold { ids: Vec<String> },

    #[error("{0} is undefined on empty input")]
    EmptyInput(&'static str),

    /// A pipeline phase is missing or incomplete.
    #[error("phase `{phase}`: {reason}")]
    Phase { phase: &'static str, reason: String },

    #[error("simulation assertion(s) failed:\n  - {}", .0.join("\n  - "))]
    Assertion(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport { .. } => 2,
            Error::Assertion(_) => 3,
            _ => 1,
        }
    }
}
