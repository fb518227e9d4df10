//! Error type shared by all engine modules.

/// Engine-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is outside its documented domain.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Anchor angle too close to horizontal: the row/ray intersection is unstable.
    #[error("degenerate anchor angle: |sin(theta)| < 1e-6 at theta = {theta}")]
    DegenerateAngle { theta: f64 },

    /// Two lanes share no row where both are valid.
    #[error("no common valid rows between lanes")]
    NoCommonRows,

    /// A tensor or sequence does not have the expected dimensions.
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    /// Soft-label normalization is undefined: no positive score in the positive set.
    #[error("degenerate scores: max positive-set score is not > 0")]
    DegenerateScore,

    /// A numeric argument is outside the function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Scene sampling could not satisfy the non-crossing constraints.
    #[error("scene generation failed after {attempts} attempts")]
    GenerationFailed { attempts: usize },

    /// A file's contents do not match the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
