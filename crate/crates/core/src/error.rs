use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing data: {0}")]
    Data(String),

    #[error("corrupt message or artifact: {0}")]
    Corruption(String),

    #[error("cannot encode: {0}")]
    Encode(String),

    #[error("isolation violation: {0}")]
    IsolationViolation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage {stage} failed (config {config_hash}): {source}")]
    Stage {
        stage: String,
        config_hash: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// The innermost error, below any stage context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn in_stage(self, stage: &str, config_hash: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
