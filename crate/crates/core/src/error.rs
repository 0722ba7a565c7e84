use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor engine, models, and persistence layers.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    Shape(String),
    /// A numeric argument is outside its valid domain (e.g. temperature <= 0).
    Domain(String),
    /// An API contract was violated (empty input, non-scalar loss, state drift).
    Contract(String),
    /// A model or run configuration is invalid or inconsistent.
    Config(String),
    /// An index is out of range.
    Index(String),
    /// A file could not be parsed; carries positional context where available.
    Parse(String),
    /// Checkpoint container violations, one variant per distinct failure.
    Checkpoint(CheckpointError),
    /// Wrapped I/O failure with the path that triggered it.
    Io { path: String, source: std::io::Error },
}

/// Distinct checkpoint failure codes, kept separate so callers can react
/// to each (bad magic vs. version vs. checksum) individually.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic { found: [u8; 4] },
    UnsupportedVersion { found: u32, supported: u32 },
    ChecksumMismatch { expected: u64, computed: u64 },
    MalformedHeader { detail: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by the environment (files, permissions)
    /// rather than by arguments or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            Error::Io { path, source } => write!(f, "i/o error on {path}: {source}"),
        }
    }
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic { found } => {
                write!(f, "bad magic bytes {found:?}, expected \"DFKD\"")
            }
            CheckpointError::UnsupportedVersion { found, supported } => {
                write!(f, "unsupported format version {found}, supported up to {supported}")
            }
            CheckpointError::ChecksumMismatch { expected, computed } => {
                write!(f, "payload checksum mismatch: stored {expected:#018x}, computed {computed:#018x}")
            }
            CheckpointError::MalformedHeader { detail } => {
                write!(f, "malformed header: {detail}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Checkpoint(e)
    }
}
