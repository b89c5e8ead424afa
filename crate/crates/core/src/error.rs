//! Error type shared across the crate.

use thiserror::Error;

/// Convenience alias used by every fallible function in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Validation failures (bad arguments, malformed files, degenerate inputs)
/// are deliberately separated from runtime failures (I/O, HTTP transport,
/// authentication) so callers can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An operation that requires at least one record received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A dataset or covariate file failed to parse; `line` is 1-based.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    /// Two records share an id.
    #[error("duplicate record id {id:?}{context}")]
    DuplicateId { id: String, context: String },

    /// A fit cannot proceed, e.g. every training outcome is identical.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// Rank correlation is undefined because one side is constant.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A probability vector contained a zero/negative/non-finite entry
    /// where a strictly positive one is required.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// Confidence evidence needed by a proxy is absent from some records.
    #[error("{count} record(s) missing {kind} evidence; first ids: {sample}")]
    MissingEvidence {
        kind: String,
        count: usize,
        sample: String,
    },

    /// A synthetic-generation profile has parameters outside its domain.
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    /// The regressor has no variance, so a slope cannot be estimated.
    #[error("degenerate regressor: {0}")]
    DegenerateRegressor(String),

    /// Too few observations remain for the requested analysis.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Underlying filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// HTTP transport or non-auth status failure that survived retries.
    #[error("http error: {0}")]
    Http(String),

    /// Authentication failure (missing key, 401/403). Never retried.
    #[error("authentication error: {0}")]
    Auth(String),

    /// A model response could not be interpreted; carries the raw body so
    /// callers can log what the endpoint actually said.
    #[error("response parse error: {message}; body: {body:?}")]
    ResponseFormat { message: String, body: String },
}

impl Error {
    /// True for errors caused by caller-supplied data rather than the
    /// environment. The CLI maps these to a distinct exit code.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Http(_) | Error::Auth(_))
    }
}
