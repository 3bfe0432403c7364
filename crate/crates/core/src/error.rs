use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, F2aError>;

#[derive(Debug, Error)]
pub enum F2aError {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("series `{series}` too short: needs {needed} timesteps for L+H, has {available}")]
    SeriesTooShort {
        series: String,
        needed: usize,
        available: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {found}, expected {expected}")]
    BadVersion {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: dimension `{dim}` is {found} in file, configured {expected}")]
    DimMismatch {
        path: PathBuf,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{path}: file truncated or corrupt ({detail})")]
    Corrupt { path: PathBuf, detail: String },

    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Csv { path: PathBuf, detail: String },

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("non-finite gradient in parameter `{param}` at flat index {index}")]
    NonFiniteGradient { param: &'static str, index: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("coverage gap: timesteps {start}..{end} are not covered by any horizon")]
    CoverageGap { start: usize, end: usize },

    #[error("output `{0}` exists; pass --force to overwrite")]
    WouldOverwrite(PathBuf),

    #[error("missing input `{0}`")]
    MissingInput(PathBuf),
}

impl F2aError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        F2aError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        F2aError::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
