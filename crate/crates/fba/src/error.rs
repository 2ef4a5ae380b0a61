use std::fmt;
use std::io;

/// Crate-wide error type. Every failure carries enough context to name the
/// offending dimension, tensor, path or category in its diagnostic.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    ShapeMismatch { op: &'static str, detail: String },
    /// A scalar argument is out of its valid range.
    InvalidArgument { op: &'static str, detail: String },
    /// A serialized file does not start with the expected magic bytes.
    BadMagic { path: String },
    /// A serialized file has an unsupported format version.
    VersionMismatch { path: String, found: u32, expected: u32 },
    /// A serialized payload ends before the named tensor is complete.
    TruncatedPayload { path: String, tensor: String },
    /// Header metadata disagrees with itself or with the payload.
    FormatInconsistency { path: String, detail: String },
    /// Attention targets a ReLU layer with no feature pattern for it.
    MissingPattern { layer: u32, category: String },
    /// A category name is not in the known category set.
    UnknownCategory { category: String },
    /// Not enough images/records to satisfy a request; names the shortfall.
    InsufficientData { detail: String },
    /// Training loss became non-finite.
    Divergence { detail: String },
    /// An input artifact changed since a downstream artifact was derived.
    StaleArtifact { detail: String },
    /// Run configuration is invalid.
    Config { detail: String },
    Io { path: String, source: io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::InvalidArgument { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            Error::BadMagic { path } => write!(f, "{path}: bad magic"),
            Error::VersionMismatch { path, found, expected } => {
                write!(f, "{path}: version mismatch: found {found}, expected {expected}")
            }
            Error::TruncatedPayload { path, tensor } => {
                write!(f, "{path}: truncated payload while reading tensor '{tensor}'")
            }
            Error::FormatInconsistency { path, detail } => {
                write!(f, "{path}: format inconsistency: {detail}")
            }
            Error::MissingPattern { layer, category } => {
                write!(f, "no feature pattern for relu layer {layer}, category '{category}'")
            }
            Error::UnknownCategory { category } => write!(f, "unknown category '{category}'"),
            Error::InsufficientData { detail } => write!(f, "insufficient data: {detail}"),
            Error::Divergence { detail } => write!(f, "training diverged: {detail}"),
            Error::StaleArtifact { detail } => write!(f, "stale artifact: {detail}"),
            Error::Config { detail } => write!(f, "config error: {detail}"),
            Error::Io { path, source } => write!(f, "{path}: {source}"),
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

impl Error {
    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors that indicate a bad config or usage rather than a
    /// runtime failure; the CLI maps these to exit code 1.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::InvalidArgument { .. })
    }
}
