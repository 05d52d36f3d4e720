use thiserror::Error;

pub type Result<T, E = OaprError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OaprError {
    #[error("attribute `{0}` has no entry in the verbalization table")]
    UnmappedAttribute(String),
    #[error("verbalization rule for `{0}` maps to an empty phrase")]
    EmptyPhrase(String),
    #[error("verbalization table line {line}: {message}")]
    RulesParse { line: usize, message: String },
    #[error("phrase embedder failed: {0}")]
    ProviderFailure(String),
    #[error("requested {requested} clusters but only {rows} rows are available")]
    TooManyClusters { requested: usize, rows: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values in {0}")]
    NonFiniteOutput(String),
    #[error("template `{0}` must contain exactly one `{{}}` placeholder")]
    TemplateError(String),
    #[error("prompt ensemble for `{0}` averages to a near-zero vector")]
    DegenerateEnsemble(String),
    #[error("phrase `{phrase}` needs {needed} tokens but only {budget} fit after the context prompt")]
    ContextOverflow {
        phrase: String,
        needed: usize,
        budget: usize,
    },
    #[error("index out of range: {0}")]
    IndexError(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("failed to load image `{image_id}`: {message}")]
    ImageLoad { image_id: String, message: String },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("ranking has {got} entries, expected {expected}")]
    RankingLengthMismatch { expected: usize, got: usize },
    #[error("encoder fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
