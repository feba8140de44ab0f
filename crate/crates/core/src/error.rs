use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse config: {0}")]
    ConfigParse(String),

    #[error("invalid config value for `{key}`: {reason}")]
    ConfigInvalid { key: &'static str, reason: String },

    #[error("config mismatch on resume, changed keys: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("manifest line {line}: {reason}")]
    ManifestMalformed { line: usize, reason: String },

    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),

    #[error("backend `{backend}` failed: {reason}")]
    Backend { backend: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no edit: the two captions are identical")]
    NoEdit,

    #[error("no eligible word to mask in caption")]
    NoEligibleWord,

    #[error("degenerate direction: {0} difference vector has zero norm")]
    DegenerateDirection(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step index {index} out of range for {steps}-step schedule")]
    StepOutOfRange { index: usize, steps: usize },

    #[error("non-finite loss at diffusion step {0}")]
    NonFiniteLoss(usize),

    #[error("unknown record `{0}`")]
    UnknownRecord(String),

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("inversion archive: {0}")]
    Archive(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn backend(backend: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.into(),
            reason: reason.into(),
        }
    }
}
