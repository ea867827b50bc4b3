use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by how the CLI maps them to exit codes: config
/// errors (bad flags, invalid run configurations) exit 2, data errors
/// (missing/corrupt files, incompatible inputs) exit 3, and numeric
/// failures (non-finite values, failed gradient checks) exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds tolerance {tol:.3e}")]
    GradCheckFailed { max_rel_err: f64, tol: f64 },

    #[error("function is not deterministic: two forward evaluations differ")]
    NonDeterministic,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("checksum mismatch in {path} (episode {episode})")]
    ChecksumMismatch { path: PathBuf, episode: usize },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch} ({detail})")]
    NumericFailure {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument { .. } => 2,
            Error::Data(_)
            | Error::BadMagic { .. }
            | Error::ChecksumMismatch { .. }
            | Error::Truncated { .. }
            | Error::Io { .. } => 3,
            Error::ShapeMismatch { .. }
            | Error::NonFinite { .. }
            | Error::GradCheckFailed { .. }
            | Error::NonDeterministic
            | Error::NumericFailure { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
