use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("could not extract code from teacher reply: {0}")]
    Extraction(String),

    #[error("could not parse judgment: {0}")]
    JudgmentParse(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("replay cache has no entry for request digest {digest}")]
    CacheMiss { digest: String },

    #[error("sandbox environment error: {0}")]
    Environment(String),

    #[error("patch does not apply to {file} (hunk {hunk}): {message}")]
    PatchApply { file: String, hunk: usize, message: String },

    #[error("non-finite value at node `{node}`")]
    Numeric { node: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("state error: {0}")]
    State(String),

    #[error("stage `{stage}` cannot start: predecessor `{missing}` is not done")]
    Ordering { stage: String, missing: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn numeric(node: impl Into<String>) -> Self {
        Error::Numeric { node: node.into() }
    }
}
