use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a bag file")]
    NotABagFile,

    #[error("not a checkpoint file")]
    NotACheckpoint,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated")]
    Truncated,

    #[error("non-finite value")]
    NonFinite,

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("class too small to stratify: class {0} has {1} bags")]
    ClassTooSmall(usize, usize),

    #[error("empty class {0}")]
    EmptyClass(usize),

    #[error("degenerate center for class {0}")]
    DegenerateCenter(usize),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("gradient blow-up in {0}")]
    GradientBlowUp(String),

    #[error("non-finite loss at epoch {epoch}, bag {bag}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        bag: String,
        detail: String,
    },

    #[error("unknown config key {0}")]
    UnknownConfigKey(String),

    #[error("bad config value for {key}: {value}")]
    BadConfigValue { key: String, value: String },

    #[error("manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
