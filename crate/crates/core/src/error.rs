use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("input too short: length {len} < kernel {kernel}")]
    InputTooShort { len: usize, kernel: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid region mask: {0}")]
    Mask(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("correlation undefined: {0}")]
    UndefinedMetric(String),

    #[error("no intermediate frames to reconstruct: {0}")]
    NoIntermediateFrames(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::InputTooShort { .. } => "input_too_short",
            Error::Config(_) => "config",
            Error::Index(_) => "index",
            Error::Mask(_) => "mask",
            Error::Numeric(_) => "numeric",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::NoIntermediateFrames(_) => "no_intermediate_frames",
            Error::Input(_) => "input",
            Error::Checksum(_) => "checksum",
            Error::Format(_) => "format",
            Error::MissingTensor(_) => "missing_tensor",
            Error::Io { .. } => "io",
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
