use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Failures while decoding one of the binary containers (datasets,
/// checkpoints, feature packs). Offsets are byte positions in the input.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },
    #[error("invalid header field at offset {offset}: {message}")]
    Validation { offset: u64, message: String },
    #[error("trial {trial}: label {label} out of range for {n_classes} classes")]
    LabelOutOfRange {
        trial: usize,
        label: u32,
        n_classes: u32,
    },
}

/// Coarse error classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) | Error::InvalidState(_) => ErrorCategory::Config,
            Error::InvalidData(_) | Error::Format(_) | Error::Io(_) => ErrorCategory::Data,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Fold { source, .. } => source.category(),
        }
    }

    pub(crate) fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }
}

macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid_arg;
