use thiserror::Error;

/// Errors surfaced by the tensor core, the network stack, and the data/train/eval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("function is not deterministic: two identical evaluations disagree")]
    NonDeterministic,

    #[error("non-local affinity refused: H*W = {m} exceeds the {cap} position cap")]
    MemoryGuard { m: usize, cap: usize },

    #[error("degenerate step: every channel of the batch is masked out")]
    DegenerateBatch,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("{file}:{line}: {msg}")]
    Annotation {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("parse error in {what}: {msg}")]
    Format { what: String, msg: String },

    #[error("checksum mismatch: file is corrupt or truncated")]
    Checksum,

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unknown parameter name {0:?} in tensor table")]
    UnknownParameter(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
