use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at module {module}, step {step}: loss = {loss}")]
    Diverged {
        module: usize,
        step: usize,
        loss: f64,
    },

    #[error("{path}: file not found")]
    NotFound { path: PathBuf },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Stable, machine-parseable error class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::Overflow(_) => "overflow",
            Error::OutOfRange(_) => "out-of-range",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::Empty(_) => "empty-input",
            Error::NonFinite(_) => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::NotFound { .. } => "file-not-found",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Checksum { .. } => "checksum",
            Error::Structure(_) => "structure",
            Error::Config(_) => "config",
        }
    }

    pub(crate) fn open(path: &std::path::Path, err: std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(err)
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
