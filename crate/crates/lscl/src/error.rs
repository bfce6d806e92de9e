use thiserror::Error;

#[derive(Debug, Error)]
pub enum LsclError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("unsupported primitive kind: {0}")]
    UnsupportedKind(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid label: class id {id} out of range (num_classes = {num_classes})")]
    InvalidLabel { id: usize, num_classes: usize },

    #[error("degenerate content image (std <= 1e-6)")]
    DegenerateContent,

    #[error("content generation failed after {0} retries")]
    ContentRetriesExhausted(usize),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("unknown method {got:?}; valid methods: {valid}")]
    UnknownMethod { got: String, valid: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("need at least 2 methods for ranking, got {0}")]
    TooFewMethods(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("gamma value {0} outside [0, 1] with clamping disabled")]
    GammaOutOfRange(f64),

    #[error("vendor sets differ between methods: {0}")]
    VendorMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LsclError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LsclError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        LsclError::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LsclError>;
